//! Tape-based reverse-mode differentiation over 2-D `f64` matrices.
//!
//! Every value in the graph is an `Array2<f64>`. Images travel as
//! `(H·W) × C` matrices (one row per pixel), which keeps convolutions a
//! matter of `im2col` followed by a matrix product.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a sliding window over a `(H·W) × C` image matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Input pixel row feeding output `(oy, ox)` at kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
        if iy < 0 || ix < 0 || iy >= self.height as isize || ix >= self.width as isize {
            None
        } else {
            Some(iy as usize * self.width + ix as usize)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FocalParams {
    /// Plain binary cross-entropy.
    None,
    Focal { gamma: f64, alpha: f64 },
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    SumAll(Var),
    WeightedSum(Var, Array2<f64>),
    Transpose(Var),
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { a: Var, rows: Vec<usize> },
    BroadcastRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Array2<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Array2<f64>> },
    Softmax(Var),
    LogSoftmax(Var),
    BinaryCe { logits: Var, targets: Array2<f64>, focal: FocalParams },
    Im2Col { a: Var, win: Window },
    MaxPool { a: Var, argmax: Vec<usize> },
    Dropout { a: Var, mask: Array2<f64> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], keyed by parameter.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: HashMap<ParamId, Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> + '_ {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, id: ParamId, grad: Array2<f64>) {
        self.grads.insert(id, grad);
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Array2<f64>> {
        self.grads.get_mut(&id)
    }

    /// Sum of squares over every gradient entry, accumulated in parameter order
    /// so the result does not depend on hash iteration order.
    pub fn global_norm(&self) -> f64 {
        let mut ids: Vec<_> = self.grads.keys().copied().collect();
        ids.sort();
        ids.iter()
            .map(|id| self.grads[id].iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.mapv_inplace(|x| x * factor);
        }
    }
}

/// A single forward pass recorded for differentiation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn row_broadcast_check(a: &Array2<f64>, row: &Array2<f64>, what: &str) {
    assert!(
        row.nrows() == 1 && row.ncols() == a.ncols(),
        "{what}: row operand {:?} does not broadcast over {:?}",
        row.dim(),
        a.dim()
    );
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) {
    assert_eq!(a.dim(), b.dim(), "{what}: shape mismatch");
}

fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        row.mapv_inplace(|x| {
            let e = (x - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|x| x / sum);
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A constant input that never receives gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Array2::zeros((rows, cols)))
    }

    /// Leaf for a stored parameter. Repeated calls return the same node so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.param_vars.insert(id, v);
        v
    }

    /// Parameters that were pulled into this graph.
    pub fn params_used(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.param_vars.keys().copied()
    }

    /// Per-head attention probabilities saved by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[Array2<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Hash of every branch taken by piecewise-linear ops (ReLU sign,
    /// abs sign, max/min side, max-pool argmax). Two passes with equal
    /// signatures lie on the same linear piece, so a finite difference
    /// between them is a valid derivative estimate.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{DefaultHasher, Hash, Hasher};
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => self.value(*a).iter().for_each(|&x| (x > 0.0).hash(&mut h)),
                Op::Abs(a) => self.value(*a).iter().for_each(|&x| x.partial_cmp(&0.0).hash(&mut h)),
                Op::Maximum(a, b) | Op::Minimum(a, b) => Zip::from(self.value(*a))
                    .and(self.value(*b))
                    .for_each(|&x, &y| x.partial_cmp(&y).hash(&mut h)),
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let av: ArrayView2<f64> = if ta { av.t() } else { av.view() };
        let bv: ArrayView2<f64> = if tb { bv.t() } else { bv.view() };
        assert_eq!(
            av.ncols(),
            bv.nrows(),
            "matmul: inner dimensions differ ({:?} · {:?})",
            av.dim(),
            bv.dim()
        );
        let value = av.dot(&bv);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "add");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "sub");
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "mul");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "div");
        let value = self.value(a) / self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Div(a, b), rg)
    }

    /// `a + row`, broadcasting a `1 × n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        row_broadcast_check(self.value(a), self.value(row), "add_row");
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// `a ⊙ row`, broadcasting a `1 × n` row over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        row_broadcast_check(self.value(a), self.value(row), "mul_row");
        let value = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Log(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "maximum");
        let value = Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| x.max(y));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Maximum(a, b), rg)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "minimum");
        let value = Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| x.min(y));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Minimum(a, b), rg)
    }

    /// Sum of every entry, as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    /// `Σ a ⊙ weights` for a constant weight matrix, as a `1 × 1` node.
    pub fn weighted_sum(&mut self, a: Var, weights: Array2<f64>) -> Var {
        same_shape(self.value(a), &weights, "weighted_sum");
        let value = Array2::from_elem((1, 1), (self.value(a) * &weights).sum());
        let rg = self.rg(a);
        self.push(value, Op::WeightedSum(a, weights), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        assert!(start <= end && end <= self.value(a).ncols(), "slice_cols out of range");
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols { a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut value = Array2::zeros((rows, cols));
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.nrows(), rows, "concat_cols: row count mismatch");
            value.slice_mut(s![.., offset..offset + v.ncols()]).assign(v);
            offset += v.ncols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Selects rows of `a` (duplicates allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let src = self.value(a);
        let mut value = Array2::zeros((rows.len(), src.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).assign(&src.row(r));
        }
        let rg = self.rg(a);
        self.push(value, Op::GatherRows { a, rows: rows.to_vec() }, rg)
    }

    /// Repeats a `1 × n` row `count` times.
    pub fn broadcast_rows(&mut self, a: Var, count: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), 1, "broadcast_rows expects a single row");
        let value = src.broadcast((count, src.ncols())).unwrap().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::BroadcastRows(a), rg)
    }

    /// Row-wise layer normalization with affine `1 × n` gamma/beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        row_broadcast_check(xv, self.value(gamma), "layer_norm gamma");
        row_broadcast_check(xv, self.value(beta), "layer_norm beta");
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q (n × D)`, `k (m × D)`, `v (m × D)`. `key_mask[j] == true` excludes key `j`.
    /// Returns `n × D` with heads concatenated along columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, key_mask: Option<&[bool]>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert!(heads > 0 && d % heads == 0, "attention: width {d} not divisible by {heads} heads");
        assert_eq!(kv.ncols(), d, "attention: key width mismatch");
        assert_eq!(vv.ncols(), d, "attention: value width mismatch");
        assert_eq!(kv.nrows(), vv.nrows(), "attention: key/value length mismatch");
        if let Some(m) = key_mask {
            assert_eq!(m.len(), kv.nrows(), "attention: mask length mismatch");
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = qv.slice(cols);
            let kh = kv.slice(cols);
            let vh = vv.slice(cols);
            let mut logits = qh.dot(&kh.t()) * scale;
            if let Some(m) = key_mask {
                for mut row in logits.rows_mut() {
                    for (x, &masked) in row.iter_mut().zip(m) {
                        if masked {
                            *x = f64::NEG_INFINITY;
                        }
                    }
                }
            }
            softmax_rows_inplace(&mut logits);
            out.slice_mut(cols).assign(&logits.dot(&vh));
            probs.push(logits);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, Op::Attention { q, k, v, heads, probs }, rg)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        softmax_rows_inplace(&mut value);
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    /// Element-wise binary cross-entropy (optionally focal) computed from logits.
    pub fn binary_cross_entropy(&mut self, logits: Var, targets: Array2<f64>, focal: FocalParams) -> Var {
        same_shape(self.value(logits), &targets, "binary_cross_entropy");
        let value = Zip::from(self.value(logits))
            .and(&targets)
            .map_collect(|&x, &t| match focal {
                FocalParams::None => softplus(x) - t * x,
                FocalParams::Focal { gamma, alpha } => {
                    let p = sigmoid(x);
                    // log p = -softplus(-x), log(1-p) = -softplus(x)
                    let pos = alpha * (1.0 - p).powf(gamma) * softplus(-x);
                    let neg = (1.0 - alpha) * p.powf(gamma) * softplus(x);
                    t * pos + (1.0 - t) * neg
                }
            });
        let rg = self.rg(logits);
        self.push(value, Op::BinaryCe { logits, targets, focal }, rg)
    }

    /// Unfolds sliding windows: `(H·W) × C` → `(Ho·Wo) × (k·k·C)`, columns
    /// ordered `(ky, kx, c)`.
    pub fn im2col(&mut self, a: Var, win: Window) -> Var {
        let src = self.value(a);
        assert_eq!(
            src.dim(),
            (win.height * win.width, win.channels),
            "im2col: input does not match window geometry"
        );
        let (ho, wo) = (win.out_height(), win.out_width());
        let c = win.channels;
        let mut value = Array2::zeros((ho * wo, win.kernel * win.kernel * c));
        {
            let src = src.as_slice().expect("standard layout");
            let dst = value.as_slice_mut().unwrap();
            let row_len = win.kernel * win.kernel * c;
            for oy in 0..ho {
                for ox in 0..wo {
                    let r = oy * wo + ox;
                    for ky in 0..win.kernel {
                        for kx in 0..win.kernel {
                            if let Some(p) = win.source(oy, ox, ky, kx) {
                                let off = r * row_len + (ky * win.kernel + kx) * c;
                                dst[off..off + c].copy_from_slice(&src[p * c..(p + 1) * c]);
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::Im2Col { a, win }, rg)
    }

    /// Max pooling over `(H·W) × C`; padded taps never win.
    pub fn max_pool(&mut self, a: Var, win: Window) -> Var {
        let src = self.value(a);
        assert_eq!(src.dim(), (win.height * win.width, win.channels), "max_pool geometry");
        let (ho, wo) = (win.out_height(), win.out_width());
        let c = win.channels;
        let mut value = Array2::from_elem((ho * wo, c), f64::NEG_INFINITY);
        let mut argmax = vec![usize::MAX; ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                let r = oy * wo + ox;
                for ky in 0..win.kernel {
                    for kx in 0..win.kernel {
                        if let Some(p) = win.source(oy, ox, ky, kx) {
                            for ch in 0..c {
                                let x = src[[p, ch]];
                                if x > value[[r, ch]] {
                                    value[[r, ch]] = x;
                                    argmax[r * c + ch] = p;
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::MaxPool { a, argmax }, rg)
    }

    /// Applies a precomputed dropout mask (entries 0 or `1/(1-p)`).
    pub fn dropout_with_mask(&mut self, a: Var, mask: Array2<f64>) -> Var {
        same_shape(self.value(a), &mask, "dropout");
        let value = self.value(a) * &mask;
        let rg = self.rg(a);
        self.push(value, Op::Dropout { a, mask }, rg)
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from a scalar root and returns parameter gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward from non-scalar node");
        let mut grads: Vec<Option<Array2<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::default();

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    out.grads.insert(*id, g);
                }
                Op::MatMul { a, b, ta, tb } => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    if self.rg(*a) {
                        let bop: ArrayView2<f64> = if *tb { bv.t() } else { bv.view() };
                        // d op(a) = g · op(b)^T
                        let da = if *ta { bop.dot(&g.t()) } else { g.dot(&bop.t()) };
                        accum(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let aop: ArrayView2<f64> = if *ta { av.t() } else { av.view() };
                        let db = if *tb { g.t().dot(&aop) } else { aop.t().dot(&g) };
                        accum(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accum(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accum(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accum(&mut grads, *b, -&g);
                    }
                    if self.rg(*a) {
                        accum(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accum(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.rg(*b) {
                        accum(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    if self.rg(*a) {
                        accum(&mut grads, *a, &g / bv);
                    }
                    if self.rg(*b) {
                        let db = Zip::from(&g)
                            .and(self.value(*a))
                            .and(bv)
                            .map_collect(|&g, &x, &y| -g * x / (y * y));
                        accum(&mut grads, *b, db);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        accum(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*a) {
                        accum(&mut grads, *a, g);
                    }
                }
                Op::MulRow(a, row) => {
                    if self.rg(*row) {
                        let d = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accum(&mut grads, *row, d);
                    }
                    if self.rg(*a) {
                        accum(&mut grads, *a, &g * self.value(*row));
                    }
                }
                Op::Scale(a, f) => accum(&mut grads, *a, g * *f),
                Op::AddScalar(a) => accum(&mut grads, *a, g),
                Op::Relu(a) => {
                    let d = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                    accum(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = Zip::from(&g).and(&node.value).map_collect(|&g, &y| g * y * (1.0 - y));
                    accum(&mut grads, *a, d);
                }
                Op::Exp(a) => accum(&mut grads, *a, g * &node.value),
                Op::Log(a) => accum(&mut grads, *a, g / self.value(*a)),
                Op::Abs(a) => {
                    let d = Zip::from(&g).and(self.value(*a)).map_collect(|&g, &x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    });
                    accum(&mut grads, *a, d);
                }
                Op::Maximum(a, b) | Op::Minimum(a, b) => {
                    let take_max = matches!(node.op, Op::Maximum(..));
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // ties route to `a`
                    let pick_a = Zip::from(av)
                        .and(bv)
                        .map_collect(|&x, &y| if take_max { x >= y } else { x <= y });
                    if self.rg(*a) {
                        let d = Zip::from(&g).and(&pick_a).map_collect(|&g, &p| if p { g } else { 0.0 });
                        accum(&mut grads, *a, d);
                    }
                    if self.rg(*b) {
                        let d = Zip::from(&g).and(&pick_a).map_collect(|&g, &p| if p { 0.0 } else { g });
                        accum(&mut grads, *b, d);
                    }
                }
                Op::SumAll(a) => {
                    let shape = self.value(*a).dim();
                    accum(&mut grads, *a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::WeightedSum(a, w) => accum(&mut grads, *a, w * g[[0, 0]]),
                Op::Transpose(a) => accum(&mut grads, *a, g.t().to_owned()),
                Op::SliceCols { a, start } => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accum(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        if self.rg(p) {
                            accum(&mut grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                        }
                        offset += w;
                    }
                }
                Op::GatherRows { a, rows } => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = d.row_mut(r);
                        dst += &g.row(i);
                    }
                    accum(&mut grads, *a, d);
                }
                Op::BroadcastRows(a) => accum(&mut grads, *a, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    if self.rg(*gamma) {
                        let d = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accum(&mut grads, *gamma, d);
                    }
                    if self.rg(*beta) {
                        accum(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*x) {
                        let gv = self.value(*gamma);
                        let n = xhat.ncols() as f64;
                        let mut dx = &g * gv;
                        for ((mut row, xh), &is) in dx.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std) {
                            let sum_d = row.sum();
                            let sum_dx = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>();
                            Zip::from(&mut row)
                                .and(&xh)
                                .for_each(|d, &xh| *d = is / n * (n * *d - sum_d - xh * sum_dx));
                        }
                        accum(&mut grads, *x, dx);
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Array2::zeros(qv.dim());
                    let mut dk = Array2::zeros(kv.dim());
                    let mut dv = Array2::zeros(vv.dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let go = g.slice(cols);
                        dv.slice_mut(cols).assign(&p.t().dot(&go));
                        let dp = go.dot(&vv.slice(cols).t());
                        let mut ds = dp;
                        for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum::<f64>();
                            Zip::from(&mut drow).and(&prow).for_each(|d, &p| *d = p * (*d - dot) * scale);
                        }
                        dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                    if self.rg(*q) {
                        accum(&mut grads, *q, dq);
                    }
                    if self.rg(*k) {
                        accum(&mut grads, *k, dk);
                    }
                    if self.rg(*v) {
                        accum(&mut grads, *v, dv);
                    }
                }
                Op::Softmax(a) => {
                    let mut d = g;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(node.value.rows()) {
                        let dot = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>();
                        Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d = y * (*d - dot));
                    }
                    accum(&mut grads, *a, d);
                }
                Op::LogSoftmax(a) => {
                    let mut d = g;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(node.value.rows()) {
                        let sum = drow.sum();
                        Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d -= y.exp() * sum);
                    }
                    accum(&mut grads, *a, d);
                }
                Op::BinaryCe { logits, targets, focal } => {
                    let d = Zip::from(&g)
                        .and(self.value(*logits))
                        .and(targets)
                        .map_collect(|&g, &x, &t| {
                            let p = sigmoid(x);
                            g * match *focal {
                                FocalParams::None => p - t,
                                FocalParams::Focal { gamma, alpha } => {
                                    let pos = alpha * (1.0 - p).powf(gamma) * (gamma * p * (-softplus(-x)) - (1.0 - p));
                                    let neg = (1.0 - alpha) * p.powf(gamma) * (p + gamma * (1.0 - p) * softplus(x));
                                    t * pos + (1.0 - t) * neg
                                }
                            }
                        });
                    accum(&mut grads, *logits, d);
                }
                Op::Im2Col { a, win } => {
                    let c = win.channels;
                    let (ho, wo) = (win.out_height(), win.out_width());
                    let row_len = win.kernel * win.kernel * c;
                    let mut d = Array2::<f64>::zeros((win.height * win.width, c));
                    {
                        let dst = d.as_slice_mut().unwrap();
                        let gs = g.as_standard_layout();
                        let gs = gs.as_slice().unwrap();
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let r = oy * wo + ox;
                                for ky in 0..win.kernel {
                                    for kx in 0..win.kernel {
                                        if let Some(p) = win.source(oy, ox, ky, kx) {
                                            let off = r * row_len + (ky * win.kernel + kx) * c;
                                            for ch in 0..c {
                                                dst[p * c + ch] += gs[off + ch];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accum(&mut grads, *a, d);
                }
                Op::MaxPool { a, argmax } => {
                    let c = g.ncols();
                    let mut d = Array2::zeros(self.value(*a).dim());
                    for ((r, ch), &gv) in g.indexed_iter() {
                        let p = argmax[r * c + ch];
                        if p != usize::MAX {
                            d[[p, ch]] += gv;
                        }
                    }
                    accum(&mut grads, *a, d);
                }
                Op::Dropout { a, mask } => accum(&mut grads, *a, g * mask),
            }
        }
        out
    }
}

fn accum(grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}
