use crate::error::{domain_err, Result};
use crate::numcore::Tensor;

/// One tissue core: an unordered set of patch embeddings with a single label.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub core_id: String,
    pub label: u32,
    /// `N×d`, one row per patch.
    pub instances: Tensor<f32>,
}

impl Bag {
    pub fn new(core_id: impl Into<String>, label: u32, instances: Tensor<f32>) -> Result<Self> {
        let core_id = core_id.into();
        if instances.rows() == 0 {
            return Err(domain_err!("bag {core_id} has no instances"));
        }
        if instances.cols() == 0 {
            return Err(domain_err!("bag {core_id} has zero-width embeddings"));
        }
        if !instances.is_finite() {
            return Err(domain_err!("bag {core_id} contains non-finite embeddings"));
        }
        Ok(Bag {
            core_id,
            label,
            instances,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.instances.cols()
    }

    /// Arithmetic mean of the patch embeddings.
    pub fn mean_embedding(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.dim()];
        for r in 0..self.len() {
            for (a, &v) in acc.iter_mut().zip(self.instances.row(r)) {
                *a += v as f64;
            }
        }
        let n = self.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Same bag with instances in the given row order.
    pub fn permuted(&self, order: &[usize]) -> Bag {
        let d = self.dim();
        let mut data = Vec::with_capacity(order.len() * d);
        for &i in order {
            data.extend_from_slice(self.instances.row(i));
        }
        Bag {
            core_id: self.core_id.clone(),
            label: self.label,
            instances: Tensor::from_vec(order.len(), d, data).expect("consistent shape"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_bag_rejected() {
        assert!(Bag::new("c", 0, Tensor::zeros(0, 4)).is_err());
        assert!(Bag::new("c", 0, Tensor::from_vec(1, 1, vec![f32::NAN]).unwrap()).is_err());
    }

    #[test]
    fn mean_embedding_is_column_mean() {
        let b = Bag::new("c", 1, Tensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 1.0]]).unwrap())
            .unwrap();
        assert_eq!(b.mean_embedding(), vec![2.0, 2.0]);
    }
}
