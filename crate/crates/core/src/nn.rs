//! Small building blocks over [`Graph`]: affine maps, MLPs, layer norm and
//! pre-norm transformer blocks with sparse attention patterns.

use rand::Rng;

use crate::autograd::{AttentionMask, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.register_glorot(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = store.register(format!("{name}.bias"), Mat::zeros(1, fan_out));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.register(format!("{name}.weight"), Mat::zeros(fan_in, fan_out));
        let bias = store.register(format!("{name}.bias"), Mat::zeros(1, fan_out));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        g.add_row(g.matmul(x, g.param(self.weight)), g.param(self.bias))
    }
}

/// Two-layer perceptron with a GELU hidden layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), fan_in, hidden, rng),
            out: Linear::new(store, &format!("{name}.1"), hidden, fan_out, rng),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let h = g.gelu(self.hidden.forward(g, x));
        self.out.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.register(format!("{name}.gain"), Mat::filled(1, dim, 1.0)),
            shift: store.register(format!("{name}.shift"), Mat::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        g.add_row(
            g.mul_row(g.layer_norm(x), g.param(self.gain)),
            g.param(self.shift),
        )
    }
}

/// Multi-head attention projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert_eq!(dim % heads, 0, "dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    /// `queries` attend over `memory` rows according to `allowed`.
    pub fn forward(&self, g: &Graph, queries: Var, memory: Var, allowed: AttentionMask) -> Var {
        let q = self.query.forward(g, queries);
        let k = self.key.forward(g, memory);
        let v = self.value.forward(g, memory);
        let a = g.attention(q, k, v, allowed, self.heads);
        self.out.forward(g, a)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: Mlp,
}

impl TransformerBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm_ffn: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn: Mlp::new(store, &format!("{name}.ffn"), dim, 2 * dim, dim, rng),
        }
    }

    /// Self-attention over the rows of `x`.
    pub fn forward(&self, g: &Graph, x: Var, allowed: AttentionMask) -> Var {
        let h = self.norm_attn.forward(g, x);
        let x = g.add(x, self.attn.forward(g, h, h, allowed));
        let h = self.norm_ffn.forward(g, x);
        g.add(x, self.ffn.forward(g, h))
    }

    /// Cross-attention: `queries` attend over separately supplied memory rows.
    pub fn forward_cross(
        &self,
        g: &Graph,
        queries: Var,
        memory: Var,
        allowed: AttentionMask,
    ) -> Var {
        let hq = self.norm_attn.forward(g, queries);
        let hm = self.norm_attn.forward(g, memory);
        let x = g.add(queries, self.attn.forward(g, hq, hm, allowed));
        let h = self.norm_ffn.forward(g, x);
        g.add(x, self.ffn.forward(g, h))
    }
}
