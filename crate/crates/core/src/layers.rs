//! Primitive blocks: linear maps, ELU, GLU, the gated residual network,
//! per-channel input embeddings and the LSTM cell.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{LfitError, Result};
use crate::params::{init_normal, init_uniform, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Rng;

/// ELU negative saturation; 1.0 keeps the activation C¹ at zero.
pub const ELU_ALPHA: f64 = 1.0;
/// Variance floor inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Everything a layer needs during one forward pass. Dropout is active iff
/// `rng` is present.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub rng: Option<&'a mut Rng>,
}

impl<'a> Ctx<'a> {
    pub fn eval(tape: &'a mut Tape, store: &'a ParamStore) -> Self {
        Self {
            tape,
            store,
            rng: None,
        }
    }

    pub fn train(tape: &'a mut Tape, store: &'a ParamStore, rng: &'a mut Rng) -> Self {
        Self {
            tape,
            store,
            rng: Some(rng),
        }
    }

    pub fn training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    /// Inverted dropout: zeroes with probability `rate`, rescales survivors.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let n = self.tape.value(x).len();
        let mask = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        self.tape.mul_const(x, mask)
    }
}

pub fn elu(tape: &mut Tape, x: Var, alpha: f64) -> Result<Var> {
    if !(alpha > 0.0) {
        return Err(LfitError::Contract(format!("ELU alpha must be > 0, got {alpha}")));
    }
    Ok(tape.elu(x, alpha))
}

/// `y = x·Wᵀ + b` with `W: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(&[out_dim, in_dim], in_dim, rng),
        );
        let bias = with_bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.linear(x, w, b)
    }
}

/// Gated linear unit `(xΘ₁ + b₁) ⊙ σ(xΘ₂ + b₂)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GluLayer {
    pub value_proj: LinearLayer,
    pub gate_proj: LinearLayer,
}

impl GluLayer {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Self {
            value_proj: LinearLayer::new(store, &format!("{name}.value"), in_dim, out_dim, true, rng),
            gate_proj: LinearLayer::new(store, &format!("{name}.gate"), in_dim, out_dim, true, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let value = self.value_proj.forward(ctx, x)?;
        let gate = self.gate_proj.forward(ctx, x)?;
        let gate = ctx.tape.sigmoid(gate);
        ctx.tape.mul(value, gate)
    }
}

/// Layer-norm gain and bias over the trailing axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.param(self.gain);
        let b = ctx.param(self.bias);
        ctx.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// `LayerNorm(residual + GLU(x))`, the gate/add/norm step used after the
/// LSTM and after attention.
#[derive(Debug, Clone, PartialEq)]
pub struct GateAddNorm {
    pub glu: GluLayer,
    pub norm: LayerNormParams,
}

impl GateAddNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut Rng) -> Self {
        Self {
            glu: GluLayer::new(store, &format!("{name}.glu"), dim, dim, rng),
            norm: LayerNormParams::new(store, &format!("{name}.norm"), dim),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, residual: Var) -> Result<Var> {
        let gated = self.glu.forward(ctx, x)?;
        let sum = ctx.tape.add(residual, gated)?;
        self.norm.forward(ctx, sum)
    }
}

/// Gated residual network:
/// `γ₂ = ELU(W₂a + W₃c + b₂)`, `γ₁ = W₁γ₂ + b₁`, `out = LayerNorm(a + GLU(γ₁))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrnBlock {
    pub primary_proj: LinearLayer,
    pub context_proj: Option<LinearLayer>,
    pub hidden_proj: LinearLayer,
    pub glu: GluLayer,
    pub norm: LayerNormParams,
    pub skip_proj: Option<LinearLayer>,
    pub dropout_rate: f64,
}

impl GrnBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        context_dim: Option<usize>,
        dropout_rate: f64,
        rng: &mut Rng,
    ) -> Self {
        let primary_proj = LinearLayer::new(store, &format!("{name}.primary"), in_dim, hidden, true, rng);
        let context_proj =
            context_dim.map(|c| LinearLayer::new(store, &format!("{name}.context"), c, hidden, false, rng));
        let hidden_proj = LinearLayer::new(store, &format!("{name}.hidden"), hidden, hidden, true, rng);
        let glu = GluLayer::new(store, &format!("{name}.glu"), hidden, out_dim, rng);
        let norm = LayerNormParams::new(store, &format!("{name}.norm"), out_dim);
        let skip_proj = (in_dim != out_dim)
            .then(|| LinearLayer::new(store, &format!("{name}.skip"), in_dim, out_dim, true, rng));
        Self {
            primary_proj,
            context_proj,
            hidden_proj,
            glu,
            norm,
            skip_proj,
            dropout_rate,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.glu.value_proj.out_dim
    }

    pub fn forward(&self, ctx: &mut Ctx, a: Var, c: Option<Var>) -> Result<Var> {
        let mut pre = self.primary_proj.forward(ctx, a)?;
        match (c, &self.context_proj) {
            (Some(c), Some(proj)) => {
                let pc = proj.forward(ctx, c)?;
                pre = ctx.tape.add(pre, pc)?;
            }
            (Some(_), None) => {
                return Err(LfitError::Contract(
                    "context supplied to a GRN without a context projection".into(),
                ))
            }
            (None, _) => {}
        }
        let gamma2 = ctx.tape.elu(pre, ELU_ALPHA);
        let gamma1 = self.hidden_proj.forward(ctx, gamma2)?;
        let gamma1 = ctx.dropout(gamma1, self.dropout_rate)?;
        let gated = self.glu.forward(ctx, gamma1)?;
        let residual = match &self.skip_proj {
            Some(s) => s.forward(ctx, a)?,
            None => a,
        };
        let sum = ctx.tape.add(residual, gated)?;
        self.norm.forward(ctx, sum)
    }
}

/// Maps every input channel into `d_model` space: continuous channels via a
/// learned `1 → d_model` projection, categorical channels via lookup rows.
#[derive(Debug, Clone, PartialEq)]
pub struct InputEmbedder {
    pub d_model: usize,
    pub continuous_names: Vec<String>,
    pub continuous_projs: Vec<LinearLayer>,
    pub categorical_names: Vec<String>,
    pub categorical_tables: Vec<ParamId>,
    pub cardinalities: Vec<usize>,
}

impl InputEmbedder {
    pub fn new(
        store: &mut ParamStore,
        d_model: usize,
        continuous: &[String],
        categorical: &[(String, usize)],
        rng: &mut Rng,
    ) -> Self {
        let continuous_projs = continuous
            .iter()
            .map(|n| LinearLayer::new(store, &format!("embed.cont.{n}"), 1, d_model, true, rng))
            .collect();
        let categorical_tables = categorical
            .iter()
            .map(|(n, card)| {
                store.add(
                    format!("embed.cat.{n}"),
                    init_normal(&[*card, d_model], d_model, rng),
                )
            })
            .collect();
        Self {
            d_model,
            continuous_names: continuous.to_vec(),
            continuous_projs,
            categorical_names: categorical.iter().map(|(n, _)| n.clone()).collect(),
            categorical_tables,
            cardinalities: categorical.iter().map(|(_, c)| *c).collect(),
        }
    }

    /// `[N] values -> [N, d_model]`.
    pub fn embed_continuous(&self, ctx: &mut Ctx, channel: usize, values: &[f64]) -> Result<Var> {
        let x = ctx
            .tape
            .constant(Tensor::new(vec![values.len(), 1], values.to_vec())?);
        self.continuous_projs[channel].forward(ctx, x)
    }

    /// `[N] indices -> [N, d_model]`; indices beyond the table are out of vocabulary.
    pub fn embed_categorical(&self, ctx: &mut Ctx, channel: usize, indices: &[usize]) -> Result<Var> {
        let card = self.cardinalities[channel];
        if let Some(&bad) = indices.iter().find(|&&i| i >= card) {
            return Err(LfitError::OutOfVocabulary {
                attribute: self.categorical_names[channel].clone(),
                value: format!("index {bad} (cardinality {card})"),
            });
        }
        let table = ctx.param(self.categorical_tables[channel]);
        ctx.tape.gather_rows(table, indices)
    }

    /// One `[N, d_model]` embedding per channel, continuous channels first.
    pub fn embed_inputs(
        &self,
        ctx: &mut Ctx,
        continuous: &[Vec<f64>],
        categorical: &[Vec<usize>],
    ) -> Result<Vec<Var>> {
        if continuous.len() != self.continuous_projs.len()
            || categorical.len() != self.categorical_tables.len()
        {
            return Err(LfitError::Contract(format!(
                "embedder has {} continuous and {} categorical channels, got {} and {}",
                self.continuous_projs.len(),
                self.categorical_tables.len(),
                continuous.len(),
                categorical.len()
            )));
        }
        let mut out = Vec::with_capacity(continuous.len() + categorical.len());
        for (j, v) in continuous.iter().enumerate() {
            out.push(self.embed_continuous(ctx, j, v)?);
        }
        for (j, ix) in categorical.iter().enumerate() {
            out.push(self.embed_categorical(ctx, j, ix)?);
        }
        Ok(out)
    }
}

/// Single-layer LSTM cell with gate order (input, forget, cell, output).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub input_weights: ParamId,
    pub recurrent_weights: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            input_weights: store.add(
                format!("{name}.w_ih"),
                init_uniform(&[4 * hidden, in_dim], in_dim, rng),
            ),
            recurrent_weights: store.add(
                format!("{name}.w_hh"),
                init_uniform(&[4 * hidden, hidden], hidden, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[4 * hidden])),
            hidden,
        }
    }

    /// One step on `[N, in]` inputs with `[N, hidden]` states; returns `(h_t, c_t)`.
    pub fn step(&self, ctx: &mut Ctx, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let wih = ctx.param(self.input_weights);
        let whh = ctx.param(self.recurrent_weights);
        let b = ctx.param(self.bias);
        let xi = ctx.tape.linear(x, wih, Some(b))?;
        let hh = ctx.tape.linear(h_prev, whh, None)?;
        let gates = ctx.tape.add(xi, hh)?;
        let axis = ctx.tape.shape(gates).len() - 1;
        let h = self.hidden;
        let i = ctx.tape.narrow(gates, axis, 0, h)?;
        let f = ctx.tape.narrow(gates, axis, h, h)?;
        let g = ctx.tape.narrow(gates, axis, 2 * h, h)?;
        let o = ctx.tape.narrow(gates, axis, 3 * h, h)?;
        let i = ctx.tape.sigmoid(i);
        let f = ctx.tape.sigmoid(f);
        let g = ctx.tape.tanh(g);
        let o = ctx.tape.sigmoid(o);
        let keep = ctx.tape.mul(f, c_prev)?;
        let write = ctx.tape.mul(i, g)?;
        let c = ctx.tape.add(keep, write)?;
        let tc = ctx.tape.tanh(c);
        let h = ctx.tape.mul(o, tc)?;
        Ok((h, c))
    }
}
