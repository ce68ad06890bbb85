//! Variable selection networks and the prior-knowledge (static covariate) encoder.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{LfitError, Result};
use crate::layers::{Ctx, GrnBlock};
use crate::params::ParamStore;
use crate::tape::Var;
use crate::Rng;

/// Filters each channel with its own GRN and weighs the filtered channels
/// with a softmax over a GRN of the flattened raw embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableSelector {
    pub per_variable_grns: Vec<GrnBlock>,
    pub weight_grn: GrnBlock,
    pub uses_context: bool,
    pub d_model: usize,
}

impl VariableSelector {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_inputs: usize,
        d_model: usize,
        uses_context: bool,
        dropout_rate: f64,
        rng: &mut Rng,
    ) -> Self {
        let per_variable_grns = (0..n_inputs)
            .map(|j| {
                GrnBlock::new(
                    store,
                    &format!("{name}.var{j}"),
                    d_model,
                    d_model,
                    d_model,
                    None,
                    dropout_rate,
                    rng,
                )
            })
            .collect();
        let weight_grn = GrnBlock::new(
            store,
            &format!("{name}.weights"),
            n_inputs * d_model,
            d_model,
            n_inputs,
            uses_context.then_some(d_model),
            dropout_rate,
            rng,
        );
        Self {
            per_variable_grns,
            weight_grn,
            uses_context,
            d_model,
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.per_variable_grns.len()
    }

    /// `inputs`: one `[N, d]` embedding per channel. Returns the combined
    /// `[N, d]` representation and the `[N, n_inputs]` selection weights.
    pub fn select(&self, ctx: &mut Ctx, inputs: &[Var], context: Option<Var>) -> Result<(Var, Var)> {
        let n = self.n_inputs();
        if inputs.len() != n {
            return Err(LfitError::Contract(format!(
                "variable selector expects {n} channels, got {}",
                inputs.len()
            )));
        }
        if context.is_some() != self.uses_context {
            return Err(LfitError::Contract(format!(
                "variable selector context mismatch: uses_context={}, supplied={}",
                self.uses_context,
                context.is_some()
            )));
        }
        let rows = ctx.tape.shape(inputs[0])[0];
        let d = self.d_model;

        let flat = ctx.tape.concat(inputs, 1)?;
        let logits = self.weight_grn.forward(ctx, flat, context)?;
        let weights = ctx.tape.softmax(logits, 1)?;

        let mut filtered = Vec::with_capacity(n);
        for (grn, &z) in self.per_variable_grns.iter().zip(inputs) {
            let f = grn.forward(ctx, z, None)?;
            filtered.push(ctx.tape.reshape(f, &[rows, 1, d])?);
        }
        let stacked = ctx.tape.concat(&filtered, 1)?;
        let w3 = ctx.tape.reshape(weights, &[rows, 1, n])?;
        let combined = ctx.tape.bmm(w3, stacked, false)?;
        let combined = ctx.tape.reshape(combined, &[rows, d])?;
        Ok((combined, weights))
    }
}

/// The four static context vectors.
#[derive(Debug, Clone, Copy)]
pub struct StaticContexts {
    /// Guides time-dependent variable selection.
    pub selection: Var,
    /// Initial LSTM cell state.
    pub cell: Var,
    /// Initial LSTM hidden state.
    pub hidden: Var,
    /// Temporal enrichment context.
    pub enrichment: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorKnowledgeEncoder {
    pub selector: VariableSelector,
    pub grn_cs: GrnBlock,
    pub grn_cc: GrnBlock,
    pub grn_ch: GrnBlock,
    pub grn_ce: GrnBlock,
}

impl PriorKnowledgeEncoder {
    pub fn new(
        store: &mut ParamStore,
        n_static: usize,
        d_model: usize,
        dropout_rate: f64,
        rng: &mut Rng,
    ) -> Self {
        let selector = VariableSelector::new(store, "vs_pk", n_static, d_model, false, dropout_rate, rng);
        let mut grn = |name: &str, rng: &mut Rng| {
            GrnBlock::new(store, name, d_model, d_model, d_model, None, dropout_rate, rng)
        };
        let grn_cs = grn("enc_pk.cs", rng);
        let grn_cc = grn("enc_pk.cc", rng);
        let grn_ch = grn("enc_pk.ch", rng);
        let grn_ce = grn("enc_pk.ce", rng);
        Self {
            selector,
            grn_cs,
            grn_cc,
            grn_ch,
            grn_ce,
        }
    }

    /// Combines `[B, d]` static embeddings and derives the four contexts.
    /// Also returns the `[B, n_static]` static selection weights.
    pub fn encode(&self, ctx: &mut Ctx, static_embeddings: &[Var]) -> Result<(StaticContexts, Var)> {
        if static_embeddings.is_empty() {
            return Err(LfitError::Config(
                "prior-knowledge encoder needs at least one static channel".into(),
            ));
        }
        let (combined, weights) = self.selector.select(ctx, static_embeddings, None)?;
        let contexts = StaticContexts {
            selection: self.grn_cs.forward(ctx, combined, None)?,
            cell: self.grn_cc.forward(ctx, combined, None)?,
            hidden: self.grn_ch.forward(ctx, combined, None)?,
            enrichment: self.grn_ce.forward(ctx, combined, None)?,
        };
        Ok((contexts, weights))
    }
}
