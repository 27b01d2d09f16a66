//! Parameterized building blocks on top of [`Graph`].

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::graph::{Graph, Var, Window};
use crate::params::{ParamGroup, ParamId, ParamStore};

pub fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, shape: (usize, usize)) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).unwrap();
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

pub fn kaiming_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, shape: (usize, usize)) -> Array2<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).unwrap();
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R, std: f64, shape: (usize, usize)) -> Array2<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

/// Forward-pass context: training flag plus the randomness dropout draws from.
pub struct Ctx<'r> {
    pub train: bool,
    pub dropout: f64,
    pub rng: Option<&'r mut dyn rand::RngCore>,
}

impl<'r> Ctx<'r> {
    pub fn eval() -> Self {
        Ctx { train: false, dropout: 0.0, rng: None }
    }

    pub fn train(dropout: f64, rng: &'r mut dyn rand::RngCore) -> Self {
        Ctx { train: true, dropout, rng: Some(rng) }
    }

    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Var {
        if !self.train || self.dropout <= 0.0 {
            return x;
        }
        let p = self.dropout;
        let keep = 1.0 / (1.0 - p);
        let rng = self.rng.as_mut().expect("training context without rng");
        let mask = Array2::from_shape_simple_fn(g.shape(x), || {
            if rng.random::<f64>() < p {
                0.0
            } else {
                keep
            }
        });
        g.dropout_with_mask(x, mask)
    }
}

/// `y = x · W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let w = xavier_uniform(rng, in_dim, out_dim, (in_dim, out_dim));
        let weight = store.add(format!("{name}.weight"), w, group);
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, out_dim)), group);
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        let gamma = store.add(format!("{name}.weight"), Array2::ones((1, dim)), group);
        let beta = store.add(format!("{name}.bias"), Array2::zeros((1, dim)), group);
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, Self::EPS)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every width, input first: `[in, hidden.., out]`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: &[usize], group: ParamGroup, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.layers.{i}"), w[0], w[1], group, rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        h
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.param_ids()).collect()
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
}

/// Output of [`MultiHeadAttention::forward`]; `weights` is the node holding
/// the per-head probability matrices.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, group: ParamGroup, rng: &mut R) -> Self {
        assert!(dim % heads == 0, "attention width {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            q_proj: Linear::new(store, &format!("{name}.q_proj"), dim, dim, group, rng),
            k_proj: Linear::new(store, &format!("{name}.k_proj"), dim, dim, group, rng),
            v_proj: Linear::new(store, &format!("{name}.v_proj"), dim, dim, group, rng),
            out_proj: Linear::new(store, &format!("{name}.out_proj"), dim, dim, group, rng),
            heads,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        key: Var,
        value: Var,
        key_mask: Option<&[bool]>,
    ) -> AttentionOutput {
        let q = self.q_proj.forward(g, store, query);
        let k = self.k_proj.forward(g, store, key);
        let v = self.v_proj.forward(g, store, value);
        let weights = g.attention(q, k, v, self.heads, key_mask);
        let output = self.out_proj.forward(g, store, weights);
        AttentionOutput { output, weights }
    }
}

/// Square-kernel convolution over `(H·W) × C` image matrices.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = kaiming_uniform(rng, fan_in, (fan_in, out_channels));
        let weight = store.add(format!("{name}.weight"), w, group);
        let bias = with_bias.then(|| store.add(format!("{name}.bias"), Array2::zeros((1, out_channels)), group));
        Conv2d { weight, bias, in_channels, out_channels, kernel, stride, padding }
    }

    /// Returns the output matrix and its spatial size.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, height: usize, width: usize) -> (Var, usize, usize) {
        let win = Window {
            height,
            width,
            channels: self.in_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        };
        let cols = if self.kernel == 1 && self.stride == 1 && self.padding == 0 {
            x
        } else {
            g.im2col(x, win)
        };
        let w = g.param(store, self.weight);
        let mut y = g.matmul(cols, w);
        if let Some(b) = self.bias {
            let b = g.param(store, b);
            y = g.add_row(y, b);
        }
        (y, win.out_height(), win.out_width())
    }
}
