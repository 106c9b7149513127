//! Layer building blocks shared by the backbone, the query transformer and
//! the decoder. Layers only hold [`ParamId`]s; weights live in the store.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mask, ParamId, ParamStore, Var};
use crate::tensor::Matrix;

/// Uniform Glorot initialization.
pub fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect(),
    )
}

/// Small-variance initialization for embedding tables.
pub fn embedding_init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-0.1..0.1)).collect(),
    )
}

/// Affine map `x W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(in_dim, out_dim, rng), true);
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, out_dim), false);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, dim, 1.0), false),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, dim), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value streams (self-attention passes the same node twice).
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Intermediate values of one attention call, for inspection in tests.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    /// One `queries × keys` probability matrix per head.
    pub weights: Vec<Var>,
    pub output: Var,
}

impl MultiHeadAttention {
    /// `kv_dim` is the width of the key/value stream; the query stream and the
    /// output are `dim` wide.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), kv_dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), kv_dim, dim, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var, mask: Mask) -> AttentionTrace {
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, memory);
        let v = self.value.forward(g, memory);
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.cols(q, lo, hi), g.cols(k, lo, hi), g.cols(v, lo, hi))
            };
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let probs = g.softmax(scores, mask);
            outputs.push(g.matmul(probs, vh));
            weights.push(probs);
        }
        let merged = if outputs.len() == 1 {
            outputs[0]
        } else {
            g.concat_cols(&outputs)
        };
        let output = self.output.forward(g, merged);
        AttentionTrace { weights, output }
    }
}

/// Position-wise two-layer MLP with GELU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 4 * dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: Mask) -> (Var, AttentionTrace) {
        let h = self.ln1.forward(g, x);
        let trace = self.attn.forward(g, h, h, mask);
        let x = g.add(x, trace.output);
        let h = self.ln2.forward(g, x);
        let h = self.ffn.forward(g, h);
        (g.add(x, h), trace)
    }
}
