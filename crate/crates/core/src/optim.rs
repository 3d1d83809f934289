//! AdamW, the one-bag-per-step training loop and validation-based model
//! selection.

use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::bag::Bag;
use crate::datastore::{Manifest, Split};
use crate::error::{config_err, Error, Result};
use crate::metrics::{confusion_matrix, macro_metrics, ConfusionMatrix};
use crate::model::{class_weights, ClassWeights, Model, ModelConfig, Prediction};
use crate::numcore::{ParamStore, Tensor};
use crate::rng::{shuffle, stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers and step counter, one slot per parameter of the store.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>, config: AdamWConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        AdamW {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update with decoupled weight decay,
    /// `θ ← θ − η·λ·θ − η·m̂/(√v̂ + ε)`, using the gradients in `store`.
    /// A non-finite gradient aborts before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore<f32>) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(config_err!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            ));
        }
        if let Some(p) = store.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in {} at step {}",
                p.name,
                self.t + 1
            )));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step = (c.lr / bc1) as f32;
        let inv_bc2_sqrt = (1.0 / bc2.sqrt()) as f32;
        let decay = (1.0 - c.lr * c.weight_decay) as f32;
        let eps = c.eps as f32;
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            for (i, theta) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g[i];
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (1.0 - b1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *theta = *theta * decay - step * *mi / (vi.sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WeightsFrom {
    /// Class counts of the training split.
    #[default]
    Train,
    /// Class counts over the whole manifest.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    pub class_weighting: bool,
    pub weights_from: WeightsFrom,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            optimizer: AdamWConfig::default(),
            epochs: 50,
            patience: 10,
            seed: 0,
            class_weighting: true,
            weights_from: WeightsFrom::Train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(config_err!("epochs must be at least 1"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(config_err!("learning rate must be positive, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 || o.weight_decay < 0.0 {
            return Err(config_err!("invalid AdamW constants {o:?}"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    pub val_acc: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the highest validation macro-F1
    /// (earliest such epoch on ties).
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub log: Vec<EpochLog>,
    pub final_model: Model,
}

impl TrainOutcome {
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain struct") + "\n")
            .collect()
    }
}

pub fn predict_all(model: &Model, bags: &[Bag]) -> Result<Vec<Prediction>> {
    bags.iter().map(|b| model.predict(b)).collect()
}

pub fn evaluate(model: &Model, bags: &[Bag]) -> Result<ConfusionMatrix> {
    let preds = predict_all(model, bags)?;
    let truth: Vec<usize> = bags.iter().map(|b| b.label as usize).collect();
    let pred: Vec<usize> = preds.iter().map(|p| p.label).collect();
    confusion_matrix(&truth, &pred, model.config.k)
}

/// Runs the training loop on in-memory bags.
///
/// Each epoch visits the training bags in a fresh seeded order, taking one
/// AdamW step per bag on the weighted cross-entropy. Validation macro-F1 at
/// the end of each epoch drives checkpoint selection and early stopping.
pub fn train_on_bags(
    train: &[Bag],
    val: &[Bag],
    weights: &ClassWeights,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(config_err!("training split is empty"));
    }
    if val.is_empty() {
        return Err(config_err!("validation split is empty"));
    }
    if weights.len() != config.model.k {
        return Err(config_err!("{} class weights for K={}", weights.len(), config.model.k));
    }
    let mut model = Model::new(config.model.clone(), config.seed)?;
    let mut opt = AdamW::new(&model.store, config.optimizer);
    let mut rng = stream_rng(config.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best: Option<(Model, usize, f64)> = None;
    let mut log = Vec::new();
    for epoch in 1..=config.epochs {
        shuffle(&mut order, &mut rng);
        let mut loss_sum = 0.0f64;
        for &i in &order {
            let bag = &train[i];
            let loss = model.loss_and_grad(bag, weights).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, bag {}: {msg}", bag.core_id)),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "epoch {epoch}, bag {}: non-finite loss",
                    bag.core_id
                )));
            }
            loss_sum += loss as f64;
            opt.step(&mut model.store)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, bag {}: {e}", bag.core_id)))?;
        }
        let report = macro_metrics(&evaluate(&model, val)?)?;
        let improved = best.as_ref().is_none_or(|(_, _, f1)| report.f1 > *f1);
        if improved {
            best = Some((model.clone(), epoch, report.f1));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_macro_f1: report.f1,
            val_acc: report.acc,
            best_epoch,
        });
        if config.patience > 0 && epoch - best_epoch >= config.patience {
            break;
        }
    }
    let (best, best_epoch, best_val_f1) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_f1,
        log,
        final_model: model,
    })
}

/// Loss weights for a run: inverse class frequency over the configured
/// counts, or all ones when weighting is disabled.
pub fn training_weights(manifest: &Manifest, config: &TrainConfig) -> Result<ClassWeights> {
    if !config.class_weighting {
        return Ok(ClassWeights::uniform(config.model.k));
    }
    let counts = match config.weights_from {
        WeightsFrom::Train => manifest.class_counts(Some(Split::Train)),
        WeightsFrom::All => manifest.class_counts(None),
    };
    class_weights(&counts)
}

/// Loads the train and validation splits of a manifest (bag paths relative
/// to `base`) and runs [`train_on_bags`].
pub fn train(manifest: &Manifest, base: &Path, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if manifest.d as usize != config.model.d || manifest.k as usize != config.model.k {
        return Err(config_err!(
            "model expects d={} K={}, manifest has d={} K={}",
            config.model.d,
            config.model.k,
            manifest.d,
            manifest.k
        ));
    }
    let weights = training_weights(manifest, config)?;
    let train = manifest.load_bags(base, Split::Train)?;
    let val = manifest.load_bags(base, Split::Val)?;
    train_on_bags(&train, &val, &weights, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f32, g: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let id = s.register("theta", Tensor::scalar(v));
        s.get_mut(id).grad = Tensor::scalar(g);
        s
    }

    fn value(s: &ParamStore<f32>) -> f32 {
        s.iter().next().unwrap().value.data()[0]
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..Default::default()
        };
        for g in [0.5f32, -3.0] {
            let mut s = scalar_store(1.0, g);
            let mut opt = AdamW::new(&s, cfg);
            opt.step(&mut s).unwrap();
            let expect = 1.0 - 1e-3 * g / (g.abs() + 1e-8);
            assert!((value(&s) - expect).abs() < 3e-7, "{} vs {expect}", value(&s));
            assert_eq!(opt.steps(), 1);
        }
    }

    #[test]
    fn zero_grad_fixed_point_and_decay() {
        let mut s = scalar_store(2.0, 0.0);
        let mut opt = AdamW::new(
            &s,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        opt.step(&mut s).unwrap();
        assert_eq!(value(&s), 2.0);

        let cfg = AdamWConfig {
            lr: 1e-2,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut s = scalar_store(2.0, 0.0);
        let mut opt = AdamW::new(&s, cfg);
        opt.step(&mut s).unwrap();
        assert!((value(&s) - 2.0 * (1.0 - 1e-2 * 0.5)).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut s = scalar_store(1.0, f32::NAN);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        let err = opt.step(&mut s).unwrap_err().to_string();
        assert!(err.contains("theta"), "{err}");
        assert_eq!(value(&s), 1.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn empty_splits_rejected() {
        use crate::aggregators::AggregatorKind;
        let cfg = TrainConfig::new(ModelConfig::new(AggregatorKind::Bgap, 2, 2));
        let bag = Bag::new("a", 0, Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        let w = ClassWeights::uniform(2);
        assert!(matches!(train_on_bags(&[], &[bag.clone()], &w, &cfg), Err(Error::Config(_))));
        assert!(matches!(train_on_bags(&[bag], &[], &w, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zero_epochs_rejected() {
        use crate::aggregators::AggregatorKind;
        let mut cfg = TrainConfig::new(ModelConfig::new(AggregatorKind::Bgap, 2, 2));
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
    }
}
