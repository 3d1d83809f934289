use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, domain_err, Result};
use crate::rng::{shuffle, stream_rng, Stream};

use super::manifest::{Manifest, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    /// Cores are split individually, stratified by class.
    #[default]
    Core,
    /// Whole TMAs go to one split so no slide contributes to two partitions.
    Tma,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    pub grouping: Grouping,
    /// Waives the at-least-one-unit-per-split requirement.
    pub force: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.6,
            val: 0.15,
            test: 0.25,
            seed: 0,
            grouping: Grouping::Core,
            force: false,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train, self.val, self.test];
        if fr.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(config_err!("split fractions must be non-negative, got {fr:?}"));
        }
        if !self.force && fr.iter().any(|&f| f <= 0.0) {
            return Err(config_err!("split fractions must be positive (use force to allow empty splits), got {fr:?}"));
        }
        let total: f64 = fr.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(config_err!("split fractions sum to {total}, expected 1"));
        }
        Ok(())
    }

    /// `(⌊f_train·n⌋, ⌊f_val·n⌋, remainder)`.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        // the epsilon keeps products like 0.15·20 from flooring to 2
        let floor = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
        let train = floor(self.train).min(n);
        let val = floor(self.val).min(n - train);
        (train, val, n - train - val)
    }
}

fn assign(units: &[String], spec: &SplitSpec) -> Vec<(String, Split)> {
    let (train, val, _) = spec.sizes(units.len());
    units
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let s = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            (u.clone(), s)
        })
        .collect()
}

/// Assigns every manifest entry to train/val/test.
///
/// Core grouping: per class, cores sorted by id are shuffled with the seeded
/// split stream and partitioned floor-then-remainder. TMA grouping applies
/// the same rule to the sorted set of TMA ids, without class stratification.
pub fn stratified_split(manifest: &Manifest, spec: &SplitSpec) -> Result<Manifest> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, Stream::Split);
    let mut out = manifest.clone();
    match spec.grouping {
        Grouping::Core => {
            for class in 0..manifest.k {
                let mut ids: Vec<String> = manifest
                    .entries
                    .iter()
                    .filter(|e| e.label == class)
                    .map(|e| e.core_id.clone())
                    .collect();
                if ids.is_empty() {
                    continue;
                }
                if ids.len() < 3 && !spec.force {
                    return Err(domain_err!(
                        "class {} ({}) has {} cores, at least 3 are needed for a three-way split",
                        class,
                        manifest.class_names[class as usize],
                        ids.len()
                    ));
                }
                ids.sort();
                shuffle(&mut ids, &mut rng);
                for (id, s) in assign(&ids, spec) {
                    let e = out.entries.iter_mut().find(|e| e.core_id == id).expect("id from manifest");
                    e.split = s;
                }
            }
        }
        Grouping::Tma => {
            let mut tmas: Vec<String> = manifest
                .entries
                .iter()
                .map(|e| e.tma_id.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if tmas.len() < 3 && !spec.force {
                return Err(domain_err!("{} TMAs found, at least 3 are needed for a TMA-level split", tmas.len()));
            }
            shuffle(&mut tmas, &mut rng);
            for (tma, s) in assign(&tmas, spec) {
                for e in out.entries.iter_mut().filter(|e| e.tma_id == tma) {
                    e.split = s;
                }
            }
        }
    }
    Ok(out)
}
