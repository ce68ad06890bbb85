//! The assembled forecaster: embeddings, static contexts, variable selection,
//! the LSTM encoder/decoder, temporal enrichment, interpretable attention and
//! per-target quantile heads.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attention::{CausalMask, InterpretableAttention};
use crate::dataset::{ChannelSchema, Vocabulary, WindowBatch};
use crate::error::{LfitError, Result};
use crate::layers::{Ctx, GateAddNorm, GrnBlock, InputEmbedder, LinearLayer, LstmCell};
use crate::params::ParamStore;
use crate::scenario::ScenarioSpec;
use crate::selection::{PriorKnowledgeEncoder, StaticContexts, VariableSelector};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::training::Standardizer;
use crate::{rng_from_seed, Rng};

pub const DEFAULT_QUANTILES: [f64; 7] = [0.02, 0.1, 0.25, 0.5, 0.75, 0.9, 0.98];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LfitConfig {
    pub d_model: usize,
    pub head_count: usize,
    pub encoder_length: usize,
    pub horizon: usize,
    pub quantiles: Vec<f64>,
    pub dropout_rate: f64,
}

impl Default for LfitConfig {
    fn default() -> Self {
        Self {
            d_model: 16,
            head_count: 4,
            encoder_length: 24,
            horizon: 8,
            quantiles: DEFAULT_QUANTILES.to_vec(),
            dropout_rate: 0.1,
        }
    }
}

impl LfitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LfitError::Config(m));
        if self.encoder_length == 0 || self.horizon == 0 {
            return bad("encoder_length and horizon must be >= 1".into());
        }
        if self.d_model == 0 || self.head_count == 0 || self.d_model % self.head_count != 0 {
            return bad(format!(
                "d_model ({}) must be a positive multiple of head_count ({})",
                self.d_model, self.head_count
            ));
        }
        if self.quantiles.is_empty()
            || self.quantiles.iter().any(|&q| !(q > 0.0 && q < 1.0))
            || self.quantiles.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!(
                "quantiles must be strictly increasing in (0, 1), got {:?}",
                self.quantiles
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        self.encoder_length + self.horizon
    }

    /// Index of the median quantile, or the one closest to it.
    pub fn median_index(&self) -> usize {
        let mut best = 0;
        for (i, q) in self.quantiles.iter().enumerate() {
            if (q - 0.5).abs() < (self.quantiles[best] - 0.5).abs() {
                best = i;
            }
        }
        best
    }
}

/// Quantile forecast of one window in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// `[targets, horizon, quantiles]`.
    pub values: Tensor,
    pub quantiles: Vec<f64>,
}

impl Forecast {
    pub fn at(&self, target: usize, step: usize, quantile: usize) -> f64 {
        self.values.at(&[target, step, quantile])
    }
}

/// Interpretability artifacts of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    /// `[T, T]` head-averaged attention over encoder+decoder positions.
    pub mean_attention: Tensor,
    /// `[k, n_past]`.
    pub past_variable_weights: Tensor,
    /// `[τ, n_future]`.
    pub future_variable_weights: Tensor,
    /// `[n_static]`, absent without static channels.
    pub static_weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layers {
    embedder: InputEmbedder,
    pk_encoder: Option<PriorKnowledgeEncoder>,
    vs_ts_past: VariableSelector,
    vs_ts_future: Option<VariableSelector>,
    ls2_encoder: LstmCell,
    ls2_decoder: LstmCell,
    post_lstm_gate: GateAddNorm,
    enrichment_grn: GrnBlock,
    attention: InterpretableAttention,
    post_attn_gate: GateAddNorm,
    final_grn: GrnBlock,
    output_heads: Vec<LinearLayer>,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// Standardized predictions `[B, targets, τ, Q]`.
    pub prediction: Var,
    /// `[B, T, T]`.
    pub attention: Var,
    /// `[B·k, n_past]`.
    pub past_weights: Var,
    /// `[B·τ, n_future]`, absent without future inputs.
    pub future_weights: Option<Var>,
    /// `[B, n_static]`.
    pub static_weights: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LfitModel {
    pub config: LfitConfig,
    pub schema: ChannelSchema,
    pub vocabularies: Vec<Vocabulary>,
    pub standardizer: Standardizer,
    /// Scenario the model was trained for, if any.
    pub scenario: Option<ScenarioSpec>,
    pub store: ParamStore,
    layers: Layers,
}

impl LfitModel {
    /// Builds and initializes a model from `seed`.
    pub fn new(
        config: LfitConfig,
        schema: ChannelSchema,
        vocabularies: Vec<Vocabulary>,
        standardizer: Standardizer,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if schema.targets.is_empty() {
            return Err(LfitError::Config("model needs at least one target channel".into()));
        }
        if vocabularies.len() != schema.statics.len()
            || vocabularies
                .iter()
                .zip(&schema.statics)
                .any(|(v, (n, c))| &v.attribute != n || v.len() != *c)
        {
            return Err(LfitError::Contract("vocabularies do not match static schema".into()));
        }
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let layers = build_layers(&mut store, &config, &schema, &mut rng);
        Ok(Self {
            config,
            schema,
            vocabularies,
            standardizer,
            scenario: None,
            store,
            layers,
        })
    }

    pub fn has_statics(&self) -> bool {
        self.layers.pk_encoder.is_some()
    }

    /// Records the forward graph on `ctx` and returns its handles.
    pub fn forward_vars(&self, ctx: &mut Ctx, batch: &WindowBatch) -> Result<ForwardVars> {
        self.check_batch(batch)?;
        let l = &self.layers;
        let cfg = &self.config;
        let (b, k, tau, d) = (batch.len(), cfg.encoder_length, cfg.horizon, cfg.d_model);
        let t_all = k + tau;
        let n_pc = self.schema.past_continuous().len();
        let n_cat = self.schema.known_categorical.len();
        let first_known = self.schema.targets.len() + self.schema.observed.len();

        let mut past = Vec::with_capacity(self.schema.n_past());
        for (c, col) in batch.past_continuous.iter().enumerate() {
            past.push(l.embedder.embed_continuous(ctx, c, col)?);
        }
        for (j, col) in batch.past_categorical.iter().enumerate() {
            past.push(l.embedder.embed_categorical(ctx, j, col)?);
        }
        let mut future = Vec::with_capacity(self.schema.n_future());
        for (j, col) in batch.future_continuous.iter().enumerate() {
            future.push(l.embedder.embed_continuous(ctx, first_known + j, col)?);
        }
        for (j, col) in batch.future_categorical.iter().enumerate() {
            future.push(l.embedder.embed_categorical(ctx, j, col)?);
        }
        debug_assert_eq!(past.len(), n_pc + n_cat);

        let (contexts, static_weights): (Option<StaticContexts>, Option<Var>) = match &l.pk_encoder {
            Some(enc) => {
                let mut emb = Vec::with_capacity(batch.statics.len());
                for (a, col) in batch.statics.iter().enumerate() {
                    emb.push(l.embedder.embed_categorical(ctx, n_cat + a, col)?);
                }
                let (c, w) = enc.encode(ctx, &emb)?;
                (Some(c), Some(w))
            }
            None => (None, None),
        };

        let cs_past = match contexts {
            Some(c) => Some(ctx.tape.repeat_rows(c.selection, k)?),
            None => None,
        };
        let (past_sel, past_weights) = l.vs_ts_past.select(ctx, &past, cs_past)?;
        let (future_sel, future_weights) = match &l.vs_ts_future {
            Some(vs) => {
                let cs = match contexts {
                    Some(c) => Some(ctx.tape.repeat_rows(c.selection, tau)?),
                    None => None,
                };
                let (s, w) = vs.select(ctx, &future, cs)?;
                (s, Some(w))
            }
            None => (ctx.tape.constant(Tensor::zeros(&[b * tau, d])), None),
        };
        let past3 = ctx.tape.reshape(past_sel, &[b, k, d])?;
        let future3 = ctx.tape.reshape(future_sel, &[b, tau, d])?;

        let (mut h, mut c) = match contexts {
            Some(cx) => (cx.hidden, cx.cell),
            None => {
                let z = ctx.tape.constant(Tensor::zeros(&[b, d]));
                (z, z)
            }
        };
        let mut outputs = Vec::with_capacity(t_all);
        for (cell, seq, len) in [(&l.ls2_encoder, past3, k), (&l.ls2_decoder, future3, tau)] {
            for t in 0..len {
                let x = ctx.tape.narrow(seq, 1, t, 1)?;
                let x = ctx.tape.reshape(x, &[b, d])?;
                (h, c) = cell.step(ctx, x, h, c)?;
                outputs.push(ctx.tape.reshape(h, &[b, 1, d])?);
            }
        }
        let lstm_out = ctx.tape.concat(&outputs, 1)?;
        let residual = ctx.tape.concat(&[past3, future3], 1)?;
        let gated = l.post_lstm_gate.forward(ctx, lstm_out, residual)?;

        let flat = ctx.tape.reshape(gated, &[b * t_all, d])?;
        let ce = match contexts {
            Some(cx) => Some(ctx.tape.repeat_rows(cx.enrichment, t_all)?),
            None => None,
        };
        let enriched = l.enrichment_grn.forward(ctx, flat, ce)?;
        let enriched = ctx.tape.reshape(enriched, &[b, t_all, d])?;

        let mask = CausalMask::new(t_all);
        let (attended, attention) = l.attention.forward(ctx, enriched, &mask)?;
        let fused = l.post_attn_gate.forward(ctx, attended, enriched)?;

        let decoder = ctx.tape.narrow(fused, 1, k, tau)?;
        let decoder = ctx.tape.reshape(decoder, &[b * tau, d])?;
        let decoder = l.final_grn.forward(ctx, decoder, None)?;
        let q = cfg.quantiles.len();
        let mut heads = Vec::with_capacity(l.output_heads.len());
        for head in &l.output_heads {
            let y = head.forward(ctx, decoder)?;
            heads.push(ctx.tape.reshape(y, &[b, 1, tau, q])?);
        }
        let prediction = if heads.len() == 1 {
            heads[0]
        } else {
            ctx.tape.concat(&heads, 1)?
        };
        Ok(ForwardVars {
            prediction,
            attention,
            past_weights,
            future_weights,
            static_weights,
        })
    }

    /// Training objective on a batch with attached standardized targets.
    pub fn loss(&self, ctx: &mut Ctx, batch: &WindowBatch) -> Result<Var> {
        let targets = batch
            .future_targets
            .as_ref()
            .ok_or_else(|| LfitError::Contract("batch carries no future targets".into()))?;
        let fv = self.forward_vars(ctx, batch)?;
        ctx.tape.quantile_loss(fv.prediction, targets, &self.config.quantiles)
    }

    fn check_batch(&self, batch: &WindowBatch) -> Result<()> {
        let s = &self.schema;
        let cfg = &self.config;
        let ok = batch.encoder_len == cfg.encoder_length
            && batch.horizon == cfg.horizon
            && batch.past_continuous.len() == s.past_continuous().len()
            && batch.past_categorical.len() == s.known_categorical.len()
            && batch.future_continuous.len() == s.known_continuous.len()
            && batch.future_categorical.len() == s.known_categorical.len()
            && batch.statics.len() == s.statics.len()
            && batch.n_targets() == s.targets.len();
        if !ok {
            return Err(LfitError::Contract(format!(
                "batch (k={}, τ={}, {} past continuous, {} future continuous, {} statics, {} targets) does not match model schema (k={}, τ={}, {}, {}, {}, {})",
                batch.encoder_len,
                batch.horizon,
                batch.past_continuous.len(),
                batch.future_continuous.len(),
                batch.statics.len(),
                batch.n_targets(),
                cfg.encoder_length,
                cfg.horizon,
                s.past_continuous().len(),
                s.known_continuous.len(),
                s.statics.len(),
                s.targets.len()
            )));
        }
        if batch.is_empty() {
            return Err(LfitError::Data("empty window batch".into()));
        }
        batch.check_finite(s)
    }

    /// Replaces every parameter with the same-named entry of `params`.
    pub fn set_parameters(&mut self, params: Vec<(String, Tensor)>) -> Result<()> {
        if params.len() != self.store.len() {
            return Err(LfitError::Format(format!(
                "model has {} parameter blocks, file has {}",
                self.store.len(),
                params.len()
            )));
        }
        for (name, value) in params {
            let id = self
                .store
                .find(&name)
                .ok_or_else(|| LfitError::Format(format!("unknown parameter block {name}")))?;
            if self.store.get(id).shape() != value.shape() {
                return Err(LfitError::Format(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    self.store.get(id).shape()
                )));
            }
            *self.store.get_mut(id) = value;
        }
        Ok(())
    }
}

fn build_layers(store: &mut ParamStore, cfg: &LfitConfig, schema: &ChannelSchema, rng: &mut Rng) -> Layers {
    let d = cfg.d_model;
    let p = cfg.dropout_rate;
    let mut categorical = schema.known_categorical.clone();
    categorical.extend(schema.statics.iter().cloned());
    let embedder = InputEmbedder::new(store, d, &schema.past_continuous(), &categorical, rng);
    let has_static = !schema.statics.is_empty();
    let pk_encoder = has_static.then(|| PriorKnowledgeEncoder::new(store, schema.statics.len(), d, p, rng));
    let vs_ts_past = VariableSelector::new(store, "vs_ts_past", schema.n_past(), d, has_static, p, rng);
    let vs_ts_future = (schema.n_future() > 0)
        .then(|| VariableSelector::new(store, "vs_ts_future", schema.n_future(), d, has_static, p, rng));
    let ls2_encoder = LstmCell::new(store, "ls2_encoder", d, d, rng);
    let ls2_decoder = LstmCell::new(store, "ls2_decoder", d, d, rng);
    let post_lstm_gate = GateAddNorm::new(store, "post_lstm", d, rng);
    let enrichment_grn = GrnBlock::new(store, "grn_eh", d, d, d, has_static.then_some(d), p, rng);
    let attention = InterpretableAttention::new(store, "attention", d, cfg.head_count, rng);
    let post_attn_gate = GateAddNorm::new(store, "post_attn", d, rng);
    let final_grn = GrnBlock::new(store, "final_grn", d, d, d, None, p, rng);
    let output_heads = schema
        .targets
        .iter()
        .map(|t| LinearLayer::new(store, &format!("head.{t}"), d, cfg.quantiles.len(), true, rng))
        .collect();
    Layers {
        embedder,
        pk_encoder,
        vs_ts_past,
        vs_ts_future,
        ls2_encoder,
        ls2_decoder,
        post_lstm_gate,
        enrichment_grn,
        attention,
        post_attn_gate,
        final_grn,
        output_heads,
    }
}

/// Forward pass with dropout iff `rng` is given. Forecasts are de-standardized.
pub fn lfit_forward(
    model: &LfitModel,
    batch: &WindowBatch,
    rng: Option<&mut Rng>,
) -> Result<(Vec<Forecast>, Vec<Explanation>)> {
    let mut tape = Tape::new();
    let mut ctx = Ctx {
        tape: &mut tape,
        store: &model.store,
        rng,
    };
    let fv = model.forward_vars(&mut ctx, batch)?;
    let forecasts = collect_forecasts(model, batch, tape.value(fv.prediction));
    let explanations = collect_explanations(model, batch.len(), &tape, &fv);
    Ok((forecasts, explanations))
}

/// Forecasts only, dropout off.
pub fn forecast(model: &LfitModel, batch: &WindowBatch) -> Result<Vec<Forecast>> {
    Ok(lfit_forward(model, batch, None)?.0)
}

/// Interpretability artifacts only, dropout off.
pub fn extract_explanation(model: &LfitModel, batch: &WindowBatch) -> Result<Vec<Explanation>> {
    Ok(lfit_forward(model, batch, None)?.1)
}

fn collect_forecasts(model: &LfitModel, batch: &WindowBatch, pred: &Tensor) -> Vec<Forecast> {
    let m = model.schema.targets.len();
    let (tau, q) = (model.config.horizon, model.config.quantiles.len());
    let block = m * tau * q;
    pred.data()
        .chunks(block)
        .enumerate()
        .map(|(bi, z)| {
            let mut values = Vec::with_capacity(block);
            for ti in 0..m {
                for zz in &z[ti * tau * q..(ti + 1) * tau * q] {
                    values.push(batch.destandardize(bi, ti, *zz));
                }
            }
            Forecast {
                values: Tensor::new(vec![m, tau, q], values).expect("forecast shape"),
                quantiles: model.config.quantiles.clone(),
            }
        })
        .collect()
}

fn collect_explanations(model: &LfitModel, b: usize, tape: &Tape, fv: &ForwardVars) -> Vec<Explanation> {
    let (k, tau) = (model.config.encoder_length, model.config.horizon);
    let t_all = k + tau;
    let n_past = model.schema.n_past();
    let n_future = model.schema.n_future();
    let n_static = model.schema.statics.len();
    let att = tape.value(fv.attention).data();
    let pw = tape.value(fv.past_weights).data();
    let fw = fv.future_weights.map(|v| tape.value(v).data());
    let sw = fv.static_weights.map(|v| tape.value(v).data());
    (0..b)
        .map(|i| {
            let slice = |d: &[f64], w: usize| d[i * w..(i + 1) * w].to_vec();
            Explanation {
                mean_attention: Tensor::new(vec![t_all, t_all], slice(att, t_all * t_all)).expect("shape"),
                past_variable_weights: Tensor::new(vec![k, n_past], slice(pw, k * n_past)).expect("shape"),
                future_variable_weights: Tensor::new(
                    vec![tau, n_future],
                    fw.map(|d| slice(d, tau * n_future)).unwrap_or_default(),
                )
                .expect("shape"),
                static_weights: sw.map(|d| slice(d, n_static)),
            }
        })
        .collect()
}
