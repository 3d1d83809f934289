//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every differentiable operation of one forward pass in
//! execution order. [`Tape::backward`] replays it once in reverse, writing
//! parameter gradients into the owning [`ParamStore`]. A tape is single-use:
//! a second `backward` call is rejected.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{shape_err, Error, Result};

use super::params::{ParamId, ParamStore};
use super::tensor::{check_same_shape, matmul, matmul_at, matmul_bt, Real, Tensor};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    idx: usize,
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Tanh(usize),
    Transpose(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    MeanRows(usize),
    MaxRows {
        x: usize,
        argmax: Vec<usize>,
    },
    GatherRows {
        x: usize,
        indices: Vec<usize>,
    },
    ConcatRows(usize, usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    DepthwiseConv {
        x: usize,
        weight: usize,
        bias: usize,
        side: usize,
        kernel: usize,
    },
    Select {
        x: usize,
        col: usize,
    },
    LnClamped {
        x: usize,
        floor: T,
    },
    Sum(usize),
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of non-parameter leaves that were created with `requires_grad`.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    tape: usize,
    leaves: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf variable; `None` if it did not require grad.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.leaves.get(var.idx).and_then(Option::as_ref)
    }
}

#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    id: usize,
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "variable {} does not belong to tape {}",
                v.idx, self.id
            )));
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::Graph("tape already consumed by backward".into()));
        }
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Input or constant. Gradients for it are reported by `backward` when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Records a trainable parameter; its gradient lands in the store's grad slot.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push(value, Op::MatMul(ia, ib), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        check_same_shape("add", x, y)?;
        let mut value = x.clone();
        value.add_assign(y);
        let rg = self.rg(ia) || self.rg(ib);
        self.push(value, Op::Add(ia, ib), rg)
    }

    /// Adds a `1×n` row vector to every row of an `m×n` tensor. The only
    /// broadcasting form supported.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let (x, b) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(shape_err!(
                "add_row: bias {:?} does not match rows of {:?}",
                b.shape(),
                x.shape()
            ));
        }
        let mut value = x.clone();
        for r in 0..value.rows() {
            for (v, &bv) in value.row_mut(r).iter_mut().zip(b.data()) {
                *v = *v + bv;
            }
        }
        let rg = self.rg(ia) || self.rg(ib);
        self.push(value, Op::AddRow(ia, ib), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        check_same_shape("mul", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::from_vec(x.rows(), x.cols(), data)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push(value, Op::Mul(ia, ib), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.map(|v| v * c);
        let rg = self.rg(ia);
        self.push(value, Op::Scale(ia, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.map(|v| v.max(T::zero()));
        let rg = self.rg(ia);
        self.push(value, Op::Relu(ia), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.map(T::tanh);
        let rg = self.rg(ia);
        self.push(value, Op::Tanh(ia), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.transpose();
        let rg = self.rg(ia);
        self.push(value, Op::Transpose(ia), rg)
    }

    /// Row-wise softmax with max subtraction. A `1×n` input is the plain
    /// vector softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        if x.cols() == 0 || x.rows() == 0 {
            return Err(shape_err!("softmax of empty tensor {:?}", x.shape()));
        }
        let value = softmax_rows(x);
        let rg = self.rg(ia);
        self.push(value, Op::SoftmaxRows(ia), rg)
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (xv, g, b) = (
            &self.nodes[ix].value,
            &self.nodes[ig].value,
            &self.nodes[ib].value,
        );
        let n = xv.cols();
        if n == 0 || g.shape() != (1, n) || b.shape() != (1, n) {
            return Err(shape_err!(
                "layer_norm: input {:?}, gamma {:?}, beta {:?}",
                xv.shape(),
                g.shape(),
                b.shape()
            ));
        }
        if eps <= T::zero() {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let nt = T::from_usize(n).unwrap();
        let mut xhat = Tensor::zeros(xv.rows(), n);
        let mut value = Tensor::zeros(xv.rows(), n);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().copied().fold(T::zero(), |a, v| a + v) / nt;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .fold(T::zero(), |a, v| a + v)
                / nt;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                value.set(r, c, g.data()[c] * h + b.data()[c]);
            }
        }
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        self.push(
            value,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Column-wise mean over rows: `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        if x.rows() == 0 {
            return Err(shape_err!("mean over zero rows"));
        }
        let mut acc = vec![T::zero(); x.cols()];
        for r in 0..x.rows() {
            for (s, &v) in acc.iter_mut().zip(x.row(r)) {
                *s = *s + v;
            }
        }
        let m = T::from_usize(x.rows()).unwrap();
        let value = Tensor::row_vector(acc.into_iter().map(|s| s / m).collect());
        let rg = self.rg(ia);
        self.push(value, Op::MeanRows(ia), rg)
    }

    /// Column-wise max over rows; ties resolve to the lowest row index.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        if x.rows() == 0 {
            return Err(shape_err!("max over zero rows"));
        }
        let mut best = x.row(0).to_vec();
        let mut argmax = vec![0usize; x.cols()];
        for r in 1..x.rows() {
            for (c, &v) in x.row(r).iter().enumerate() {
                if v > best[c] {
                    best[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let rg = self.rg(ia);
        self.push(Tensor::row_vector(best), Op::MaxRows { x: ia, argmax }, rg)
    }

    /// Selects rows by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        let mut data = Vec::with_capacity(indices.len() * x.cols());
        for &i in indices {
            if i >= x.rows() {
                return Err(shape_err!("gather_rows: row {i} out of {}", x.rows()));
            }
            data.extend_from_slice(x.row(i));
        }
        let value = Tensor::from_vec(indices.len(), x.cols(), data)?;
        let rg = self.rg(ia);
        self.push(
            value,
            Op::GatherRows {
                x: ia,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    /// Stacks `a` on top of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if x.cols() != y.cols() {
            return Err(shape_err!(
                "concat_rows: {:?} and {:?}",
                x.shape(),
                y.shape()
            ));
        }
        let mut data = x.data().to_vec();
        data.extend_from_slice(y.data());
        let value = Tensor::from_vec(x.rows() + y.rows(), x.cols(), data)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push(value, Op::ConcatRows(ia, ib), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        if start + len > x.cols() {
            return Err(shape_err!(
                "slice_cols {start}..{} of {:?}",
                start + len,
                x.shape()
            ));
        }
        let mut data = Vec::with_capacity(x.rows() * len);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let value = Tensor::from_vec(x.rows(), len, data)?;
        let rg = self.rg(ia);
        self.push(value, Op::SliceCols { x: ia, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts
            .iter()
            .map(|&v| self.idx(v))
            .collect::<Result<Vec<_>>>()?;
        let rows = idx.first().map_or(0, |&i| self.nodes[i].value.rows());
        if idx.iter().any(|&i| self.nodes[i].value.rows() != rows) {
            return Err(shape_err!("concat_cols: row counts differ"));
        }
        let cols: usize = idx.iter().map(|&i| self.nodes[i].value.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &i in &idx {
                data.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let value = Tensor::from_vec(rows, cols, data)?;
        let rg = idx.iter().any(|&i| self.rg(i));
        self.push(value, Op::ConcatCols(idx), rg)
    }

    /// Per-channel 2-D convolution with zero "same" padding. Rows of `x`
    /// (`side²×C`) are grid cells in row-major order; `weight` is
    /// `C×kernel²`, `bias` is `1×C`.
    pub fn depthwise_conv_grid(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        side: usize,
        kernel: usize,
    ) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(weight)?, self.idx(bias)?);
        let (xv, w, b) = (
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            &self.nodes[ib].value,
        );
        let c = xv.cols();
        if kernel.is_multiple_of(2)
            || xv.rows() != side * side
            || w.shape() != (c, kernel * kernel)
            || b.shape() != (1, c)
        {
            return Err(shape_err!(
                "depthwise_conv_grid: input {:?} on {side}x{side} grid, weight {:?}, bias {:?}, kernel {kernel}",
                xv.shape(),
                w.shape(),
                b.shape()
            ));
        }
        let mut value = Tensor::zeros(xv.rows(), c);
        for p in 0..xv.rows() {
            value.row_mut(p).copy_from_slice(b.data());
        }
        for_each_tap(side, kernel, |out_pos, in_pos, tap| {
            let x_row = xv.row(in_pos);
            let out_row = value.row_mut(out_pos);
            for ch in 0..c {
                out_row[ch] = out_row[ch] + w.data()[ch * kernel * kernel + tap] * x_row[ch];
            }
        });
        let rg = self.rg(ix) || self.rg(iw) || self.rg(ib);
        self.push(
            value,
            Op::DepthwiseConv {
                x: ix,
                weight: iw,
                bias: ib,
                side,
                kernel,
            },
            rg,
        )
    }

    /// Picks element `(0, col)` of a row vector as a `1×1` tensor.
    pub fn select(&mut self, a: Var, col: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        if x.rows() != 1 || col >= x.cols() {
            return Err(shape_err!("select column {col} of {:?}", x.shape()));
        }
        let value = Tensor::scalar(x.get(0, col));
        let rg = self.rg(ia);
        self.push(value, Op::Select { x: ia, col }, rg)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, a: Var, floor: T) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.map(|v| v.max(floor).ln());
        let rg = self.rg(ia);
        self.push(value, Op::LnClamped { x: ia, floor }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = Tensor::scalar(self.nodes[ia].value.sum());
        let rg = self.rg(ia);
        self.push(value, Op::Sum(ia), rg)
    }

    /// Propagates `d loss` back through the tape. All gradient slots of
    /// `store` are reset first, so parameters the loss does not reach end
    /// with zero gradient. Parameter gradients accumulate if a parameter
    /// was recorded more than once.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        if self.consumed {
            return Err(Error::Graph("backward already ran on this tape".into()));
        }
        let shape = self.nodes[li].value.shape();
        if shape != (1, 1) {
            return Err(shape_err!("loss must be 1x1, got {shape:?}"));
        }
        self.consumed = true;
        store.zero_grads();

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(Tensor::scalar(T::one()));

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let rg = |j: usize| nodes[j].requires_grad;
            let val = |j: usize| &nodes[j].value;
            match &nodes[i].op {
                Op::Leaf => leaves[i] = Some(g),
                Op::Param(id) => {
                    let slot = &mut store.get_mut(*id).grad;
                    if slot.shape() != g.shape() {
                        return Err(shape_err!(
                            "gradient shape {:?} does not match parameter {:?}",
                            g.shape(),
                            slot.shape()
                        ));
                    }
                    slot.add_assign(&g);
                }
                Op::MatMul(a, b) => {
                    if rg(*a) {
                        accumulate(&mut grads, *a, matmul_bt(&g, val(*b)));
                    }
                    if rg(*b) {
                        accumulate(&mut grads, *b, matmul_at(val(*a), &g));
                    }
                }
                Op::Add(a, b) => {
                    if rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, b) => {
                    if rg(*b) {
                        accumulate(&mut grads, *b, column_sums(&g));
                    }
                    if rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        accumulate(&mut grads, *a, zip_map(&g, val(*b), |p, q| p * q));
                    }
                    if rg(*b) {
                        accumulate(&mut grads, *b, zip_map(&g, val(*a), |p, q| p * q));
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|v| v * c));
                }
                Op::Relu(a) => {
                    let dx = zip_map(&g, val(*a), |d, x| if x > T::zero() { d } else { T::zero() });
                    accumulate(&mut grads, *a, dx);
                }
                Op::Tanh(a) => {
                    let dx = zip_map(&g, &nodes[i].value, |d, y| d * (T::one() - y * y));
                    accumulate(&mut grads, *a, dx);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::SoftmaxRows(a) => {
                    let y = &nodes[i].value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot = yr
                            .iter()
                            .zip(gr)
                            .fold(T::zero(), |s, (&p, &q)| s + p * q);
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = val(*gamma);
                    let n = xhat.cols();
                    let nt = T::from_usize(n).unwrap();
                    if rg(*gamma) {
                        accumulate(&mut grads, *gamma, column_sums(&zip_map(&g, xhat, |d, h| d * h)));
                    }
                    if rg(*beta) {
                        accumulate(&mut grads, *beta, column_sums(&g));
                    }
                    if rg(*x) {
                        let mut dx = Tensor::zeros(xhat.rows(), n);
                        for r in 0..xhat.rows() {
                            let (gr, hr) = (g.row(r), xhat.row(r));
                            let mut mean_d = T::zero();
                            let mut mean_dh = T::zero();
                            for c in 0..n {
                                let d = gr[c] * gv.data()[c];
                                mean_d = mean_d + d;
                                mean_dh = mean_dh + d * hr[c];
                            }
                            mean_d = mean_d / nt;
                            mean_dh = mean_dh / nt;
                            for c in 0..n {
                                let d = gr[c] * gv.data()[c];
                                dx.set(r, c, inv_std[r] * (d - mean_d - hr[c] * mean_dh));
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::MeanRows(a) => {
                    let (m, n) = val(*a).shape();
                    let inv = T::one() / T::from_usize(m).unwrap();
                    let mut dx = Tensor::zeros(m, n);
                    for r in 0..m {
                        for (o, &d) in dx.row_mut(r).iter_mut().zip(g.data()) {
                            *o = d * inv;
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::MaxRows { x, argmax } => {
                    let (m, n) = val(*x).shape();
                    let mut dx = Tensor::zeros(m, n);
                    for (c, &r) in argmax.iter().enumerate() {
                        dx.set(r, c, g.data()[c]);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::GatherRows { x, indices } => {
                    let (m, n) = val(*x).shape();
                    let mut dx = Tensor::zeros(m, n);
                    for (k, &r) in indices.iter().enumerate() {
                        for (o, &d) in dx.row_mut(r).iter_mut().zip(g.row(k)) {
                            *o = *o + d;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatRows(a, b) => {
                    let (ra, n) = val(*a).shape();
                    let rb = val(*b).rows();
                    if rg(*a) {
                        let top = Tensor::from_vec(ra, n, g.data()[..ra * n].to_vec())?;
                        accumulate(&mut grads, *a, top);
                    }
                    if rg(*b) {
                        let bottom = Tensor::from_vec(rb, n, g.data()[ra * n..].to_vec())?;
                        accumulate(&mut grads, *b, bottom);
                    }
                }
                Op::SliceCols { x, start } => {
                    let (m, n) = val(*x).shape();
                    let len = g.cols();
                    let mut dx = Tensor::zeros(m, n);
                    for r in 0..m {
                        dx.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (m, n) = val(p).shape();
                        if rg(p) {
                            let mut dp = Tensor::zeros(m, n);
                            for r in 0..m {
                                dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + n]);
                            }
                            accumulate(&mut grads, p, dp);
                        }
                        offset += n;
                    }
                }
                Op::DepthwiseConv {
                    x,
                    weight,
                    bias,
                    side,
                    kernel,
                } => {
                    let (xv, w) = (val(*x), val(*weight));
                    let c = xv.cols();
                    let kk = kernel * kernel;
                    if rg(*bias) {
                        accumulate(&mut grads, *bias, column_sums(&g));
                    }
                    let mut dx = Tensor::zeros(xv.rows(), c);
                    let mut dw = Tensor::zeros(c, kk);
                    for_each_tap(*side, *kernel, |out_pos, in_pos, tap| {
                        let (gr, xr) = (g.row(out_pos), xv.row(in_pos));
                        for ch in 0..c {
                            let wv = w.data()[ch * kk + tap];
                            let dxr = dx.row_mut(in_pos);
                            dxr[ch] = dxr[ch] + wv * gr[ch];
                            let dwv = &mut dw.data_mut()[ch * kk + tap];
                            *dwv = *dwv + xr[ch] * gr[ch];
                        }
                    });
                    if rg(*weight) {
                        accumulate(&mut grads, *weight, dw);
                    }
                    if rg(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Select { x, col } => {
                    let mut dx = Tensor::zeros(1, val(*x).cols());
                    dx.set(0, *col, g.data()[0]);
                    accumulate(&mut grads, *x, dx);
                }
                Op::LnClamped { x, floor } => {
                    let floor = *floor;
                    let dx = zip_map(&g, val(*x), |d, v| if v > floor { d / v } else { T::zero() });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sum(a) => {
                    let (m, n) = val(*a).shape();
                    accumulate(&mut grads, *a, Tensor::filled(m, n, g.data()[0]));
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            leaves,
        })
    }
}

fn op_name<T: Real>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Tanh(_) => "tanh",
        Op::Transpose(_) => "transpose",
        Op::SoftmaxRows(_) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::MeanRows(_) => "mean_rows",
        Op::MaxRows { .. } => "max_rows",
        Op::GatherRows { .. } => "gather_rows",
        Op::ConcatRows(..) => "concat_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(_) => "concat_cols",
        Op::DepthwiseConv { .. } => "depthwise_conv_grid",
        Op::Select { .. } => "select",
        Op::LnClamped { .. } => "ln_clamped",
        Op::Sum(_) => "sum",
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], idx: usize, g: Tensor<T>) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn column_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let mut acc = vec![T::zero(); g.cols()];
    for r in 0..g.rows() {
        for (s, &v) in acc.iter_mut().zip(g.row(r)) {
            *s = *s + v;
        }
    }
    Tensor::row_vector(acc)
}

/// Visits every (output cell, input cell, kernel tap) triple of a
/// zero-padded "same" convolution on a `side×side` grid.
fn for_each_tap(side: usize, kernel: usize, mut f: impl FnMut(usize, usize, usize)) {
    let half = (kernel / 2) as isize;
    let s = side as isize;
    for r in 0..s {
        for c in 0..s {
            for dr in 0..kernel as isize {
                let ir = r + dr - half;
                if ir < 0 || ir >= s {
                    continue;
                }
                for dc in 0..kernel as isize {
                    let ic = c + dc - half;
                    if ic < 0 || ic >= s {
                        continue;
                    }
                    f(
                        (r * s + c) as usize,
                        (ir * s + ic) as usize,
                        (dr * kernel as isize + dc) as usize,
                    );
                }
            }
        }
    }
}

/// Row-wise max-subtracted softmax on a plain tensor.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let o = out.row_mut(r);
        let mut total = T::zero();
        for (oc, &v) in o.iter_mut().zip(row) {
            *oc = (v - max).exp();
            total = total + *oc;
        }
        for oc in o.iter_mut() {
            *oc = *oc / total;
        }
    }
    out
}
