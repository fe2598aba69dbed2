//! Parameterized building blocks: linear maps, 1D convolutions, layer norm
//! and post-norm transformer blocks.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{init_uniform, ParamId, ParamStore};
use crate::tensor::Tensor2;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x W + b` with `W: in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            w: store.insert(&format!("{name}.w"), init_uniform(d_in, d_out, d_in, rng)),
            b: store.insert(&format!("{name}.b"), Tensor2::zeros(1, d_out)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }
}

/// Same-padded 1D convolution over time, as an unfold followed by a
/// linear map with weight `(kernel * in) x out`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub linear: Linear,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            linear: Linear::new(store, name, kernel * d_in, d_out, rng),
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let cols = g.unfold(x, self.kernel);
        self.linear.forward(g, cols)
    }

    pub fn param_count(d_in: usize, d_out: usize, kernel: usize) -> usize {
        Linear::param_count(kernel * d_in, d_out)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.insert(&format!("{name}.gamma"), Tensor2::filled(1, d, 1.0)),
            beta: store.insert(&format!("{name}.beta"), Tensor2::zeros(1, d)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Multi-head self-attention with input and output projections.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, x);
        let v = self.v.forward(g, x);
        let a = g.attention(q, k, v, self.heads);
        self.out.forward(g, a)
    }
}

/// Self-attention and a two-layer convolutional feed-forward module, each
/// wrapped as `LayerNorm(x + Dropout(sublayer(x)))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub attention: SelfAttention,
    pub norm1: LayerNorm,
    pub ffn_in: Conv1d,
    pub ffn_out: Conv1d,
    pub norm2: LayerNorm,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn_width: usize,
        ffn_kernel: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            attention: SelfAttention::new(store, &format!("{name}.attn"), d, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            ffn_in: Conv1d::new(store, &format!("{name}.ffn_in"), d, ffn_width, ffn_kernel, rng),
            ffn_out: Conv1d::new(store, &format!("{name}.ffn_out"), ffn_width, d, ffn_kernel, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
        }
    }

    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, x: Var, dropout: f64, rng: &mut R) -> Var {
        let a = self.attention.forward(g, x);
        let a = g.dropout(a, dropout, rng);
        let r = g.add(x, a);
        let h = self.norm1.forward(g, r);
        let f = self.ffn_in.forward(g, h);
        let f = g.relu(f);
        let f = self.ffn_out.forward(g, f);
        let f = g.dropout(f, dropout, rng);
        let r = g.add(h, f);
        self.norm2.forward(g, r)
    }

    /// `4 (d^2 + d)` attention + `4 d` norms + both convolutions.
    pub fn param_count(d: usize, ffn_width: usize, ffn_kernel: usize) -> usize {
        4 * Linear::param_count(d, d)
            + 4 * d
            + Conv1d::param_count(d, ffn_width, ffn_kernel)
            + Conv1d::param_count(ffn_width, d, ffn_kernel)
    }
}
