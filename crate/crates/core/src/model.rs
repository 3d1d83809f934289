//! Classifier head, weighted cross-entropy objective, class weights and
//! parameter accounting.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregators::{
    attention_pool, bgap, bgmp, transmil_forward, AggregatorKind, AggregatorParams, AttentionParams,
    Linear, TransMilConfig, TransMilParams,
};
use crate::bag::Bag;
use crate::error::{config_err, domain_err, shape_err, Result};
use crate::numcore::{softmax_rows, ParamStore, Real, Tape, Tensor, Var};
use crate::rng::{stream_rng, Stream};

/// Lower clamp applied to probabilities before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub aggregator: AggregatorKind,
    /// Instance embedding width.
    pub d: usize,
    /// Number of classes.
    pub k: usize,
    #[serde(default = "default_attn_hidden")]
    pub attn_hidden: usize,
    #[serde(default)]
    pub transmil: TransMilConfig,
}

fn default_attn_hidden() -> usize {
    128
}

impl ModelConfig {
    pub fn new(aggregator: AggregatorKind, d: usize, k: usize) -> Self {
        ModelConfig {
            aggregator,
            d,
            k,
            attn_hidden: default_attn_hidden(),
            transmil: TransMilConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(config_err!("need at least 2 classes, got {}", self.k));
        }
        if self.d == 0 {
            return Err(config_err!("embedding width must be positive"));
        }
        Ok(())
    }
}

/// All trainable tensors of one aggregator + classifier configuration.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub aggregator: AggregatorParams,
    /// `d×K` head for the pooling aggregators; the transformer carries its own.
    pub classifier: Option<Linear>,
    pub d: usize,
    pub k: usize,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub logits: Var,
    /// Softmax class scores `S`, `1×K`.
    pub scores: Var,
    pub attention: Option<Var>,
}

impl ModelParams {
    pub fn init<T: Real, R: rand::Rng>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, k) = (config.d, config.k);
        let aggregator = match config.aggregator {
            AggregatorKind::Bgap => AggregatorParams::Bgap,
            AggregatorKind::Bgmp => AggregatorParams::Bgmp,
            AggregatorKind::MilAtt => {
                AggregatorParams::Attention(AttentionParams::init(store, d, config.attn_hidden, rng)?)
            }
            AggregatorKind::TransMil => {
                AggregatorParams::TransMil(Box::new(TransMilParams::init(store, d, k, &config.transmil, rng)?))
            }
        };
        let classifier = match aggregator {
            AggregatorParams::TransMil(_) => None,
            _ => Some(Linear::init(store, "classifier", d, k, true, rng)),
        };
        Ok(ModelParams {
            aggregator,
            classifier,
            d,
            k,
        })
    }

    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Option<Var>)> {
        let (_, cols) = tape.shape(x);
        if cols != self.d {
            return Err(shape_err!("bag width {cols} does not match model width {}", self.d));
        }
        let embedding = match &self.aggregator {
            AggregatorParams::Bgap => bgap(tape, x)?,
            AggregatorParams::Bgmp => bgmp(tape, x)?,
            AggregatorParams::Attention(p) => attention_pool(tape, store, p, x)?,
            AggregatorParams::TransMil(p) => return Ok((transmil_forward(tape, store, p, x)?, None)),
        };
        let head = self.classifier.as_ref().expect("pooling aggregators carry a classifier");
        Ok((head.forward(tape, store, embedding.vector)?, embedding.attention))
    }

    /// Aggregate, classify and normalize: `S = softmax(f_φ(f_α(X)))`.
    pub fn forward_classify<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Forward> {
        let (logits, attention) = self.logits(tape, store, x)?;
        let scores = tape.softmax(logits)?;
        Ok(Forward {
            logits,
            scores,
            attention,
        })
    }
}

/// Per-class loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn uniform(k: usize) -> Self {
        ClassWeights(vec![1.0; k])
    }

    pub fn from_values(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(domain_err!("class weights must be positive and finite: {w:?}"));
        }
        Ok(ClassWeights(w))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::from_values(self.0.iter().map(|w| w * c).collect())
    }
}

/// Weights inversely proportional to class counts, `w_k = T / (K·n_k)` with
/// `T = Σ n_k`, so that the count-weighted mean weight is 1.
pub fn class_weights(counts: &[usize]) -> Result<ClassWeights> {
    if counts.is_empty() {
        return Err(domain_err!("no classes"));
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(domain_err!("class {k} has no instances"));
    }
    let total: usize = counts.iter().sum();
    let k = counts.len() as f64;
    Ok(ClassWeights(
        counts.iter().map(|&n| total as f64 / (k * n as f64)).collect(),
    ))
}

/// A validated one-hot target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OneHot {
    pub class: usize,
    pub k: usize,
}

impl OneHot {
    pub fn new(class: usize, k: usize) -> Result<Self> {
        if class >= k {
            return Err(domain_err!("class {class} out of range for K={k}"));
        }
        Ok(OneHot { class, k })
    }

    pub fn from_slice(y: &[f64]) -> Result<Self> {
        let ones: Vec<usize> = y.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
        if ones.len() != 1 || y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(domain_err!("target {y:?} is not one-hot"));
        }
        Ok(OneHot { class: ones[0], k: y.len() })
    }
}

/// `L = −(1/K)·Σ_k w_k·Y_k·ln(max(S_k, 1e-12))`, which with a one-hot `Y`
/// reduces to `−(1/K)·w_y·ln S_y`.
pub fn weighted_ce<T: Real>(tape: &mut Tape<T>, scores: Var, target: OneHot, weights: &ClassWeights) -> Result<Var> {
    let (rows, k) = tape.shape(scores);
    if rows != 1 || k != target.k || weights.len() != k {
        return Err(shape_err!(
            "weighted_ce: scores {:?}, target K={}, {} weights",
            (rows, k),
            target.k,
            weights.len()
        ));
    }
    let picked = tape.select(scores, target.class)?;
    let log = tape.ln_clamped(picked, T::lit(PROB_FLOOR))?;
    let factor = -weights.values()[target.class] / k as f64;
    tape.scale(log, T::lit(factor))
}

/// Plain-value form of [`weighted_ce`].
pub fn weighted_ce_value(scores: &[f64], target: &[f64], weights: &ClassWeights) -> Result<f64> {
    let y = OneHot::from_slice(target)?;
    if scores.len() != y.k || weights.len() != y.k {
        return Err(shape_err!("weighted_ce: {} scores, {} targets, {} weights", scores.len(), y.k, weights.len()));
    }
    let s = scores[y.class].max(PROB_FLOOR);
    Ok(-weights.values()[y.class] * s.ln() / y.k as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub entries: Vec<(String, usize)>,
    pub total: usize,
}

pub fn count_params<T: Real>(store: &ParamStore<T>) -> ParamBreakdown {
    let entries: Vec<(String, usize)> = store.iter().map(|p| (p.name.clone(), p.value.len())).collect();
    let total = entries.iter().map(|(_, n)| n).sum();
    ParamBreakdown { entries, total }
}

/// Result of classifying one bag.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub scores: Vec<f32>,
    /// Argmax of the scores, lowest index on ties.
    pub label: usize,
    pub attention: Option<Vec<f32>>,
}

pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A trainable model: configuration, parameter handles and values.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub store: ParamStore<f32>,
}

impl Model {
    /// Fresh parameters drawn from the initialization stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng: ChaCha8Rng = stream_rng(seed, Stream::Init);
        let mut store = ParamStore::new();
        let params = ModelParams::init(&config, &mut store, &mut rng)?;
        Ok(Model { config, params, store })
    }

    pub fn count_params(&self) -> ParamBreakdown {
        count_params(&self.store)
    }

    fn check_bag(&self, bag: &Bag) -> Result<()> {
        if bag.dim() != self.config.d {
            return Err(shape_err!(
                "bag {} has width {}, model expects {}",
                bag.core_id,
                bag.dim(),
                self.config.d
            ));
        }
        Ok(())
    }

    pub fn predict(&self, bag: &Bag) -> Result<Prediction> {
        self.check_bag(bag)?;
        let mut tape = Tape::new();
        let x = tape.constant(bag.instances.clone())?;
        let out = self.params.forward_classify(&mut tape, &self.store, x)?;
        let scores = tape.value(out.scores).data().to_vec();
        Ok(Prediction {
            label: argmax(&scores),
            scores,
            attention: out.attention.map(|a| tape.value(a).data().to_vec()),
        })
    }

    /// Forward and backward on one bag; gradients land in the store.
    pub fn loss_and_grad(&mut self, bag: &Bag, weights: &ClassWeights) -> Result<f32> {
        self.check_bag(bag)?;
        let target = OneHot::new(bag.label as usize, self.config.k)?;
        let mut tape = Tape::new();
        let x = tape.constant(bag.instances.clone())?;
        let out = self.params.forward_classify(&mut tape, &self.store, x)?;
        let loss = weighted_ce(&mut tape, out.scores, target, weights)?;
        let value = tape.value(loss).data()[0];
        tape.backward(loss, &mut self.store)?;
        Ok(value)
    }

    pub fn loss(&self, bag: &Bag, weights: &ClassWeights) -> Result<f32> {
        self.check_bag(bag)?;
        let target = OneHot::new(bag.label as usize, self.config.k)?;
        let mut tape = Tape::new();
        let x = tape.constant(bag.instances.clone())?;
        let out = self.params.forward_classify(&mut tape, &self.store, x)?;
        let loss = weighted_ce(&mut tape, out.scores, target, weights)?;
        Ok(tape.value(loss).data()[0])
    }
}

/// Softmax class scores of a logit row, outside any tape.
pub fn scores_from_logits(logits: &[f32]) -> Vec<f32> {
    softmax_rows(&Tensor::row_vector(logits.to_vec())).into_data()
}
