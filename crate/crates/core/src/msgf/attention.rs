//! Multi-head attention and post-norm transformer encoder stacks.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{input_err, Result};
use crate::linalg::Matrix;
use crate::nn::{LayerNorm, Linear, LEAKY_SLOPE};
use crate::params::{ParamId, ParamStore};
use crate::rng::{glorot, KefsRng};

/// Bias-free query/key/value/output projections of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionProjections {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionProjections {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut KefsRng) -> Self {
        Self {
            wq: store.insert(format!("{name}.wq"), glorot(rng, dim, dim)),
            wk: store.insert(format!("{name}.wk"), glorot(rng, dim, dim)),
            wv: store.insert(format!("{name}.wv"), glorot(rng, dim, dim)),
            wo: store.insert(format!("{name}.wo"), glorot(rng, dim, dim)),
        }
    }

    /// `concat_h softmax(Q_h K_hᵀ / √d_h) V_h · W_O` with `Q = q W_Q` etc.
    pub fn forward(&self, tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (wq, wk, wv, wo) = (
            tape.param(self.wq),
            tape.param(self.wk),
            tape.param(self.wv),
            tape.param(self.wo),
        );
        let q = tape.matmul(q, wq);
        let k = tape.matmul(k, wk);
        let v = tape.matmul(v, wv);
        let mixed = scaled_dot_product(tape, q, k, v, heads);
        tape.matmul(mixed, wo)
    }
}

/// Per-head scaled dot-product attention over already projected inputs.
pub fn scaled_dot_product(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let dim = tape.shape(q).1;
    assert!(heads >= 1 && dim % heads == 0, "model dim {dim} not divisible by {heads} heads");
    let head_dim = dim / heads;
    let scale = 1.0 / libm::sqrt(head_dim as f64);
    let outputs: Vec<Var> = (0..heads)
        .map(|h| {
            let qh = tape.slice_cols(q, h * head_dim, head_dim);
            let kh = tape.slice_cols(k, h * head_dim, head_dim);
            let vh = tape.slice_cols(v, h * head_dim, head_dim);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scores);
            tape.matmul(weights, vh)
        })
        .collect();
    if outputs.len() == 1 {
        outputs[0]
    } else {
        tape.concat_cols(&outputs)
    }
}

/// Attention weight matrices, one `n_q x n_k` matrix per head.
pub fn attention_weights(q: &Matrix, k: &Matrix, heads: usize) -> Result<Vec<Matrix>> {
    if q.cols() != k.cols() {
        return Err(input_err!("query dim {} differs from key dim {}", q.cols(), k.cols()));
    }
    if heads == 0 || q.cols() % heads != 0 {
        return Err(input_err!("model dim {} is not divisible by {heads} heads", q.cols()));
    }
    let head_dim = q.cols() / heads;
    let mut tape = Tape::new();
    let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
    Ok((0..heads)
        .map(|h| {
            let qh = tape.slice_cols(qv, h * head_dim, head_dim);
            let kh = tape.slice_cols(kv, h * head_dim, head_dim);
            let kt = tape.transpose(kh);
            let s = tape.matmul(qh, kt);
            let s = tape.scale(s, 1.0 / libm::sqrt(head_dim as f64));
            let w = tape.softmax_rows(s);
            tape.value(w).clone()
        })
        .collect())
}

/// One post-norm encoder layer: attention + residual + norm, then a
/// two-layer feed-forward block + residual + norm.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub attn: AttentionProjections,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

impl AttentionLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut KefsRng) -> Self {
        Self {
            attn: AttentionProjections::new(store, &format!("{name}.attn"), dim, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, 2 * dim, true, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), 2 * dim, dim, true, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, key: Var, value: Var, heads: usize) -> Var {
        let a = self.attn.forward(tape, x, key, value, heads);
        let x = tape.add(x, a);
        let x = self.norm1.forward(tape, x);
        let f = self.ff1.forward(tape, x);
        let f = tape.leaky_relu(f, LEAKY_SLOPE);
        let f = self.ff2.forward(tape, f);
        let x = tape.add(x, f);
        self.norm2.forward(tape, x)
    }
}

/// A stack of encoder layers. With a context it runs cross-attention (the
/// running state queries the context); without one, self-attention.
#[derive(Clone, Debug)]
pub struct AttentionStack {
    pub heads: usize,
    pub layers: Vec<AttentionLayer>,
}

impl AttentionStack {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, layers: usize, heads: usize, rng: &mut KefsRng) -> Self {
        assert!(layers >= 1, "attention stack needs at least one layer");
        assert!(heads >= 1 && dim % heads == 0, "model dim {dim} not divisible by {heads} heads");
        Self {
            heads,
            layers: (0..layers)
                .map(|l| AttentionLayer::new(store, &format!("{name}.layer{l}"), dim, rng))
                .collect(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, query: Var, context: Option<Var>) -> Var {
        let mut x = query;
        for layer in &self.layers {
            x = match context {
                Some(ctx) => layer.forward(tape, x, ctx, ctx, self.heads),
                None => layer.forward(tape, x, x, x, self.heads),
            };
        }
        x
    }
}
