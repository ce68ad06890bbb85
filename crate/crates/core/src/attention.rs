//! Scaled dot-product attention and the interpretable multi-head variant
//! whose heads share one value projection.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{LfitError, Result};
use crate::layers::{Ctx, LinearLayer};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::Rng;

/// Lower-triangular attention mask: position `i` may attend to `j` iff `j <= i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalMask {
    len: usize,
    allowed: Vec<bool>,
}

impl CausalMask {
    pub fn new(len: usize) -> Self {
        let mut allowed = vec![false; len * len];
        for i in 0..len {
            for j in 0..=i {
                allowed[i * len + j] = true;
            }
        }
        Self { len, allowed }
    }

    /// Arbitrary mask, mainly for tests.
    pub fn from_allowed(len: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != len * len {
            return Err(LfitError::Contract(format!(
                "mask of {} entries for length {len}",
                allowed.len()
            )));
        }
        Ok(Self { len, allowed })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.len + j]
    }
}

/// `Softmax(QKᵀ/√d)` over allowed positions, applied to `V`.
/// Shapes: `q, k: [B, T, d]`, `v: [B, T, d_v]`. Returns `(output, attn [B, T, T])`.
pub fn scaled_attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: &CausalMask) -> Result<(Var, Var)> {
    let t = tape.shape(q)[1];
    if t != mask.len() || tape.shape(k)[1] != t || tape.shape(v)[1] != t {
        return Err(LfitError::Shape {
            op: "scaled_attention",
            lhs: tape.shape(q).to_vec(),
            rhs: vec![mask.len()],
        });
    }
    let attn = attention_weights(tape, q, k, mask)?;
    let out = tape.bmm(attn, v, false)?;
    Ok((out, attn))
}

fn attention_weights(tape: &mut Tape, q: Var, k: Var, mask: &CausalMask) -> Result<Var> {
    let d = tape.shape(q)[2];
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / crate::math::sqrt(d as f64));
    tape.masked_softmax(scores, mask.allowed())
}

/// Multi-head attention with per-head query/key projections, a single shared
/// value projection, and head-averaged attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpretableAttention {
    pub head_count: usize,
    pub d_attn: usize,
    pub query_projs: Vec<LinearLayer>,
    pub key_projs: Vec<LinearLayer>,
    pub value_proj: LinearLayer,
    pub output_proj: LinearLayer,
}

impl InterpretableAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, head_count: usize, rng: &mut Rng) -> Self {
        let d_attn = (d_model / head_count.max(1)).max(1);
        let query_projs = (0..head_count)
            .map(|h| LinearLayer::new(store, &format!("{name}.q{h}"), d_model, d_attn, true, rng))
            .collect();
        let key_projs = (0..head_count)
            .map(|h| LinearLayer::new(store, &format!("{name}.k{h}"), d_model, d_attn, true, rng))
            .collect();
        Self {
            head_count,
            d_attn,
            query_projs,
            key_projs,
            value_proj: LinearLayer::new(store, &format!("{name}.v"), d_model, d_attn, true, rng),
            output_proj: LinearLayer::new(store, &format!("{name}.out"), d_attn, d_model, true, rng),
        }
    }

    /// Per-head attention matrices `[B, T, T]` (exposed for inspection).
    pub fn head_weights(&self, ctx: &mut Ctx, x: Var, mask: &CausalMask) -> Result<Vec<Var>> {
        let mut heads = Vec::with_capacity(self.head_count);
        for (qp, kp) in self.query_projs.iter().zip(&self.key_projs) {
            let q = qp.forward(ctx, x)?;
            let k = kp.forward(ctx, x)?;
            heads.push(attention_weights(ctx.tape, q, k, mask)?);
        }
        Ok(heads)
    }

    /// `x: [B, T, d_model]` → (`[B, T, d_model]`, mean attention `[B, T, T]`).
    pub fn forward(&self, ctx: &mut Ctx, x: Var, mask: &CausalMask) -> Result<(Var, Var)> {
        let t = ctx.tape.shape(x)[1];
        if t != mask.len() {
            return Err(LfitError::Shape {
                op: "interpretable_mha",
                lhs: ctx.tape.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let heads = self.head_weights(ctx, x, mask)?;
        let mut sum = heads[0];
        for &h in &heads[1..] {
            sum = ctx.tape.add(sum, h)?;
        }
        let mean = ctx.tape.scale(sum, 1.0 / self.head_count as f64);
        let v = self.value_proj.forward(ctx, x)?;
        let mixed = ctx.tape.bmm(mean, v, false)?;
        let out = self.output_proj.forward(ctx, mixed)?;
        Ok((out, mean))
    }
}
