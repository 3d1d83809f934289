//! Instance-to-bag aggregation: average pooling, max pooling, attention
//! pooling and a transformer aggregator with a class token.
//!
//! Every aggregator consumes the `N×d` instance matrix as a tape variable so
//! that it composes with the classifier and loss under one backward pass.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, domain_err, shape_err, Error, Result};
use crate::numcore::{ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AggregatorKind {
    #[serde(rename = "bgap")]
    Bgap,
    #[serde(rename = "bgmp")]
    Bgmp,
    #[serde(rename = "milatt")]
    MilAtt,
    #[serde(rename = "transmil")]
    TransMil,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 4] = [
        AggregatorKind::Bgap,
        AggregatorKind::Bgmp,
        AggregatorKind::MilAtt,
        AggregatorKind::TransMil,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AggregatorKind::Bgap => "bgap",
            AggregatorKind::Bgmp => "bgmp",
            AggregatorKind::MilAtt => "milatt",
            AggregatorKind::TransMil => "transmil",
        }
    }
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for AggregatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AggregatorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| config_err!("unknown aggregator {s:?} (expected bgap|bgmp|milatt|transmil)"))
    }
}

/// Output of a pooling aggregator.
#[derive(Clone, Copy, Debug)]
pub struct BagEmbedding {
    /// `1×d`.
    pub vector: Var,
    /// `1×N` instance weights, attention pooling only.
    pub attention: Option<Var>,
}

/// `U(−1/√fan_in, 1/√fan_in)`, the usual linear-layer initialization.
pub(crate) fn uniform_init<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("sized buffer")
}

fn normal_init<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("sized buffer")
}

/// Fully connected layer `y = x·W + b`, `W` stored as `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.register(format!("{name}.weight"), uniform_init(rng, fan_in, fan_out, fan_in));
        let bias = bias.then(|| store.register(format!("{name}.bias"), uniform_init(rng, 1, fan_out, fan_in)));
        Linear { weight, bias }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b)?;
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

fn check_bag<T: Real>(tape: &Tape<T>, x: Var, d: usize) -> Result<usize> {
    let (n, cols) = tape.shape(x);
    if n == 0 {
        return Err(domain_err!("empty bag"));
    }
    if cols != d {
        return Err(shape_err!("bag embedding width {cols} does not match aggregator width {d}"));
    }
    Ok(n)
}

/// Column-wise mean over instances.
pub fn bgap<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<BagEmbedding> {
    if tape.shape(x).0 == 0 {
        return Err(domain_err!("empty bag"));
    }
    Ok(BagEmbedding {
        vector: tape.mean_rows(x)?,
        attention: None,
    })
}

/// Column-wise max over instances; the subgradient goes to the lowest
/// row index among tied maxima.
pub fn bgmp<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<BagEmbedding> {
    if tape.shape(x).0 == 0 {
        return Err(domain_err!("empty bag"));
    }
    Ok(BagEmbedding {
        vector: tape.max_rows(x)?,
        attention: None,
    })
}

/// Ungated attention pooling: `a = softmax_n(wᵀ·tanh(V·x_n))`, `z = Σ a_n·x_n`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    /// `d×h`.
    pub v: ParamId,
    /// `h×1`.
    pub w: ParamId,
    pub d: usize,
    pub hidden: usize,
}

impl AttentionParams {
    pub fn init<T: Real, R: Rng>(store: &mut ParamStore<T>, d: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if hidden < 1 {
            return Err(config_err!("attention hidden size must be at least 1"));
        }
        let v = store.register("attention.v", uniform_init(rng, d, hidden, d));
        let w = store.register("attention.w", uniform_init(rng, hidden, 1, hidden));
        Ok(AttentionParams { v, w, d, hidden })
    }
}

pub fn attention_pool<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &AttentionParams,
    x: Var,
) -> Result<BagEmbedding> {
    check_bag(tape, x, params.d)?;
    let v = tape.param(store, params.v)?;
    let w = tape.param(store, params.w)?;
    let hidden = tape.matmul(x, v)?;
    let hidden = tape.tanh(hidden)?;
    let scores = tape.matmul(hidden, w)?;
    let scores = tape.transpose(scores)?;
    let weights = tape.softmax(scores)?;
    let vector = tape.matmul(weights, x)?;
    Ok(BagEmbedding {
        vector,
        attention: Some(weights),
    })
}

/// Hyperparameters of the transformer aggregator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransMilConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub kernels: Vec<usize>,
}

impl Default for TransMilConfig {
    fn default() -> Self {
        TransMilConfig {
            d_model: 512,
            heads: 8,
            layers: 2,
            kernels: vec![7, 5, 3],
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    /// Fused query/key/value projection, `d_model×3·d_model`, no bias.
    pub qkv: ParamId,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct PosConv {
    pub kernel: usize,
    /// `d_model×kernel²`.
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct TransMilParams {
    pub d: usize,
    pub k: usize,
    pub config: TransMilConfig,
    pub input: Linear,
    pub cls_token: ParamId,
    pub layers: Vec<AttentionLayer>,
    pub pos: Vec<PosConv>,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub head: Linear,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl TransMilParams {
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        d: usize,
        k: usize,
        config: &TransMilConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let dm = config.d_model;
        if dm == 0 || config.heads == 0 || !dm.is_multiple_of(config.heads) {
            return Err(config_err!(
                "d_model {dm} must be a positive multiple of the head count {}",
                config.heads
            ));
        }
        if config.layers == 0 {
            return Err(config_err!("transformer aggregator needs at least one attention layer"));
        }
        if config.kernels.iter().any(|&k| k % 2 == 0) {
            return Err(config_err!("positional kernels must be odd, got {:?}", config.kernels));
        }
        let input = Linear::init(store, "transmil.input", d, dm, true, rng);
        let cls_token = store.register("transmil.cls_token", normal_init(rng, 1, dm));
        let mut layers = Vec::with_capacity(config.layers);
        let mut pos = Vec::new();
        for l in 0..config.layers {
            let prefix = format!("transmil.layer{l}");
            let norm_gamma = store.register(format!("{prefix}.norm.gamma"), Tensor::filled(1, dm, T::one()));
            let norm_beta = store.register(format!("{prefix}.norm.beta"), Tensor::zeros(1, dm));
            let qkv = store.register(format!("{prefix}.attn.qkv"), uniform_init(rng, dm, 3 * dm, dm));
            let out = Linear::init(store, &format!("{prefix}.attn.out"), dm, dm, true, rng);
            layers.push(AttentionLayer {
                norm_gamma,
                norm_beta,
                qkv,
                out,
            });
            if l == 0 {
                for &kernel in &config.kernels {
                    let fan_in = kernel * kernel;
                    let weight = store.register(
                        format!("transmil.pos.conv{kernel}.weight"),
                        uniform_init(rng, dm, kernel * kernel, fan_in),
                    );
                    let bias = store.register(
                        format!("transmil.pos.conv{kernel}.bias"),
                        uniform_init(rng, 1, dm, fan_in),
                    );
                    pos.push(PosConv { kernel, weight, bias });
                }
            }
        }
        let norm_gamma = store.register("transmil.norm.gamma", Tensor::filled(1, dm, T::one()));
        let norm_beta = store.register("transmil.norm.beta", Tensor::zeros(1, dm));
        let head = Linear::init(store, "transmil.head", dm, k, true, rng);
        Ok(TransMilParams {
            d,
            k,
            config: config.clone(),
            input,
            cls_token,
            layers,
            pos,
            norm_gamma,
            norm_beta,
            head,
        })
    }
}

/// Length the instance sequence is padded to: the next perfect square.
pub fn squared_length(n: usize) -> usize {
    let mut side = (n as f64).sqrt() as usize;
    while side * side < n {
        side += 1;
    }
    while side > 0 && (side - 1) * (side - 1) >= n {
        side -= 1;
    }
    side * side
}

/// Row order of the padded sequence: all instances, then leading instances
/// repeated cyclically until the length is a perfect square.
pub fn squaring_indices(n: usize) -> Vec<usize> {
    let m = squared_length(n);
    (0..m).map(|i| if i < n { i } else { (i - n) % n }).collect()
}

/// Pre-norm multi-head exact softmax self-attention with a residual.
fn attention_block<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layer: &AttentionLayer,
    heads: usize,
    x: Var,
) -> Result<Var> {
    let dm = tape.shape(x).1;
    let head_dim = dm / heads;
    let gamma = tape.param(store, layer.norm_gamma)?;
    let beta = tape.param(store, layer.norm_beta)?;
    let h = tape.layer_norm(x, gamma, beta, T::lit(LAYER_NORM_EPS))?;
    let qkv_w = tape.param(store, layer.qkv)?;
    let qkv = tape.matmul(h, qkv_w)?;
    let scale = T::one() / T::lit(head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let q = tape.slice_cols(qkv, i * head_dim, head_dim)?;
        let k = tape.slice_cols(qkv, dm + i * head_dim, head_dim)?;
        let v = tape.slice_cols(qkv, 2 * dm + i * head_dim, head_dim)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax(scores)?;
        outs.push(tape.matmul(attn, v)?);
    }
    let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let projected = layer.out.forward(tape, store, merged)?;
    tape.add(x, projected)
}

/// Convolutional positional encoding over the non-class tokens laid out on a
/// square grid: `x + Σ_k conv_k(x)`. The class token passes through.
fn positional_encoding<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    convs: &[PosConv],
    seq: Var,
    m: usize,
) -> Result<Var> {
    let side = (m as f64).sqrt().round() as usize;
    let cls = tape.gather_rows(seq, &[0])?;
    let idx: Vec<usize> = (1..=m).collect();
    let tokens = tape.gather_rows(seq, &idx)?;
    let mut acc = tokens;
    for conv in convs {
        let w = tape.param(store, conv.weight)?;
        let b = tape.param(store, conv.bias)?;
        let y = tape.depthwise_conv_grid(tokens, w, b, side, conv.kernel)?;
        acc = tape.add(acc, y)?;
    }
    tape.concat_rows(cls, acc)
}

/// Transformer aggregator and its classifier: returns `1×K` logits.
pub fn transmil_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &TransMilParams,
    x: Var,
) -> Result<Var> {
    let n = check_bag(tape, x, params.d)?;
    let projected = params.input.forward(tape, store, x)?;
    let projected = tape.relu(projected)?;
    let order = squaring_indices(n);
    let m = order.len();
    let padded = if m == n { projected } else { tape.gather_rows(projected, &order)? };
    let cls = tape.param(store, params.cls_token)?;
    let mut seq = tape.concat_rows(cls, padded)?;
    for (l, layer) in params.layers.iter().enumerate() {
        seq = attention_block(tape, store, layer, params.config.heads, seq)?;
        if l == 0 {
            seq = positional_encoding(tape, store, &params.pos, seq, m)?;
        }
    }
    let gamma = tape.param(store, params.norm_gamma)?;
    let beta = tape.param(store, params.norm_beta)?;
    let cls_out = tape.gather_rows(seq, &[0])?;
    let normed = tape.layer_norm(cls_out, gamma, beta, T::lit(LAYER_NORM_EPS))?;
    params.head.forward(tape, store, normed)
}

/// Trainable state of one aggregator variant.
#[derive(Clone, Debug)]
pub enum AggregatorParams {
    Bgap,
    Bgmp,
    Attention(AttentionParams),
    TransMil(Box<TransMilParams>),
}

impl AggregatorParams {
    pub fn kind(&self) -> AggregatorKind {
        match self {
            AggregatorParams::Bgap => AggregatorKind::Bgap,
            AggregatorParams::Bgmp => AggregatorKind::Bgmp,
            AggregatorParams::Attention(_) => AggregatorKind::MilAtt,
            AggregatorParams::TransMil(_) => AggregatorKind::TransMil,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bag_var(tape: &mut Tape<f32>, rows: &[Vec<f32>]) -> Var {
        tape.constant(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn pooling_worked_examples() {
        let mut tape = Tape::new();
        let x = bag_var(&mut tape, &[vec![1.0, 3.0], vec![3.0, 1.0]]);
        let avg = bgap(&mut tape, x).unwrap().vector;
        let max = bgmp(&mut tape, x).unwrap().vector;
        assert_eq!(tape.value(avg).data(), &[2.0, 2.0]);
        assert_eq!(tape.value(max).data(), &[3.0, 3.0]);

        let v = vec![0.25, -1.5, 4.0];
        let x = bag_var(&mut tape, &[v.clone(), v.clone(), v.clone()]);
        let avg = bgap(&mut tape, x).unwrap().vector;
        assert_eq!(tape.value(avg).data(), v.as_slice());
        let single = bag_var(&mut tape, &[v.clone()]);
        let max = bgmp(&mut tape, single).unwrap().vector;
        assert_eq!(tape.value(max).data(), v.as_slice());
    }

    #[test]
    fn empty_bag_is_domain_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(0, 3)).unwrap();
        assert!(matches!(bgap(&mut tape, x), Err(Error::Domain(_))));
        assert!(matches!(bgmp(&mut tape, x), Err(Error::Domain(_))));
    }

    #[test]
    fn attention_singleton_and_identical_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let p = AttentionParams::init(&mut store, 3, 8, &mut rng).unwrap();
        let mut tape = Tape::new();
        let one = bag_var(&mut tape, &[vec![0.5, -0.5, 2.0]]);
        let e = attention_pool(&mut tape, &store, &p, one).unwrap();
        assert_eq!(tape.value(e.attention.unwrap()).data(), &[1.0]);
        assert_eq!(tape.value(e.vector).data(), &[0.5, -0.5, 2.0]);

        let same = bag_var(&mut tape, &vec![vec![0.1, 0.2, 0.3]; 4]);
        let e = attention_pool(&mut tape, &store, &p, same).unwrap();
        for &a in tape.value(e.attention.unwrap()).data() {
            assert!((a - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn attention_rejects_zero_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        assert!(matches!(
            AttentionParams::init(&mut store, 3, 0, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attention_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let p = AttentionParams::init(&mut store, 3, 5, &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_rows(&rows).unwrap()).unwrap();
        let e = attention_pool(&mut tape, &store, &p, x).unwrap();

        let (v, w) = (store.value(p.v), store.value(p.w));
        let scores: Vec<f64> = rows
            .iter()
            .map(|xn| {
                (0..5)
                    .map(|j| {
                        let pre: f64 = (0..3).map(|i| xn[i] * v.get(i, j)).sum();
                        w.get(j, 0) * pre.tanh()
                    })
                    .sum()
            })
            .collect();
        let max = scores.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let a: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let z: Vec<f64> = (0..3).map(|c| (0..4).map(|n| a[n] * rows[n][c]).sum()).collect();

        for (got, want) in tape.value(e.attention.unwrap()).data().iter().zip(&a) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in tape.value(e.vector).data().iter().zip(&z) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn squaring_lengths() {
        assert_eq!(squared_length(1), 1);
        assert_eq!(squared_length(3), 4);
        assert_eq!(squared_length(4), 4);
        assert_eq!(squared_length(5), 9);
        assert_eq!(squared_length(121), 121);
        assert_eq!(squaring_indices(3), vec![0, 1, 2, 0]);
        assert_eq!(squaring_indices(5), vec![0, 1, 2, 3, 4, 0, 1, 2, 3]);
        assert_eq!(squaring_indices(2), vec![0, 1, 0, 1]);
    }

    fn small_transmil(store: &mut ParamStore<f32>, d: usize) -> TransMilParams {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = TransMilConfig {
            d_model: 8,
            heads: 2,
            layers: 2,
            kernels: vec![7, 5, 3],
        };
        TransMilParams::init(store, d, 4, &cfg, &mut rng).unwrap()
    }

    #[test]
    fn transmil_sequence_lengths_and_determinism() {
        let mut store = ParamStore::new();
        let p = small_transmil(&mut store, 6);
        for (n, expect_nodes_seq) in [(3usize, 5usize), (1, 2)] {
            let rows: Vec<Vec<f32>> = (0..n).map(|i| vec![i as f32 * 0.1; 6]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_rows(&rows).unwrap()).unwrap();
            let logits = transmil_forward(&mut tape, &store, &p, x).unwrap();
            assert_eq!(tape.shape(logits), (1, 4));
            assert_eq!(squared_length(n) + 1, expect_nodes_seq);
            let s = crate::numcore::softmax_rows(tape.value(logits));
            assert!((s.sum() - 1.0).abs() < 1e-6);

            let mut tape2 = Tape::new();
            let x2 = tape2.constant(Tensor::from_rows(&rows).unwrap()).unwrap();
            let logits2 = transmil_forward(&mut tape2, &store, &p, x2).unwrap();
            assert_eq!(tape.value(logits), tape2.value(logits2));
        }
    }

    #[test]
    fn transmil_rejects_bad_inputs() {
        let mut store = ParamStore::new();
        let p = small_transmil(&mut store, 6);
        let mut tape = Tape::new();
        let empty = tape.constant(Tensor::zeros(0, 6)).unwrap();
        assert!(matches!(transmil_forward(&mut tape, &store, &p, empty), Err(Error::Domain(_))));
        let wrong = tape.constant(Tensor::zeros(2, 5)).unwrap();
        assert!(matches!(transmil_forward(&mut tape, &store, &p, wrong), Err(Error::Shape(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = TransMilConfig {
            d_model: 10,
            heads: 4,
            ..TransMilConfig::default()
        };
        assert!(TransMilParams::init(&mut ParamStore::<f32>::new(), 6, 4, &bad, &mut rng).is_err());
    }

    #[test]
    fn kind_parses() {
        assert_eq!("TransMIL".parse::<AggregatorKind>().unwrap(), AggregatorKind::TransMil);
        assert!("rnn".parse::<AggregatorKind>().is_err());
    }
}
