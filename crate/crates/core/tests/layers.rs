use lfit_core::attention::{CausalMask, InterpretableAttention};
use lfit_core::gradcheck::{check_gradient, check_param_gradients};
use lfit_core::layers::{elu, Ctx, GateAddNorm, GluLayer, GrnBlock, LstmCell};
use lfit_core::params::ParamStore;
use lfit_core::selection::{PriorKnowledgeEncoder, VariableSelector};
use lfit_core::{rng_from_seed, Result, Tape, Tensor, Var};
use rand::Rng as _;

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-1.5..1.5);
    }
    t
}

/// Weighted sum with fixed pseudo-random coefficients.
fn readout(tape: &mut Tape, y: Var) -> Result<Var> {
    let n = tape.value(y).len();
    let w = (0..n).map(|i| ((i * 7919 + 3) % 17) as f64 / 17.0 - 0.5).collect();
    let p = tape.mul_const(y, w)?;
    Ok(tape.sum(p))
}

fn all_coords(store: &ParamStore) -> Vec<(lfit_core::params::ParamId, usize)> {
    store
        .ids()
        .flat_map(|id| (0..store.get(id).len()).map(move |i| (id, i)))
        .collect()
}

/// Checks gradients w.r.t. the input and every parameter coordinate.
fn check_layer<F>(store: &ParamStore, x: &Tensor, f: F)
where
    F: Fn(&mut Ctx, Var) -> Result<Var>,
{
    let err_x = check_gradient(
        |tape, v| {
            let mut ctx = Ctx::eval(tape, store);
            let y = f(&mut ctx, v)?;
            readout(ctx.tape, y)
        },
        x,
        STEP,
    )
    .unwrap();
    assert!(err_x <= TOL, "input gradient error {err_x}");
    let err_p = check_param_gradients(
        store,
        |tape, s| {
            let v = tape.constant(x.clone());
            let mut ctx = Ctx::eval(tape, s);
            let y = f(&mut ctx, v)?;
            readout(ctx.tape, y)
        },
        STEP,
        &all_coords(store),
    )
    .unwrap();
    assert!(err_p <= TOL, "parameter gradient error {err_p}");
}

#[test]
fn elu_gradient() {
    let store = ParamStore::new();
    let mut x = random(&[3, 5], 1);
    // keep probes off the origin
    for v in x.data_mut() {
        if v.abs() < 1e-3 {
            *v = 0.1;
        }
    }
    check_layer(&store, &x, |ctx, v| elu(ctx.tape, v, 1.0));
}

#[test]
fn glu_gradient() {
    let mut store = ParamStore::new();
    let glu = GluLayer::new(&mut store, "glu", 4, 3, &mut rng_from_seed(2));
    check_layer(&store, &random(&[5, 4], 3), |ctx, v| glu.forward(ctx, v));
}

#[test]
fn grn_gradient_with_and_without_context() {
    let mut store = ParamStore::new();
    let mut rng = rng_from_seed(4);
    let plain = GrnBlock::new(&mut store, "a", 4, 4, 4, None, 0.0, &mut rng);
    let skip = GrnBlock::new(&mut store, "b", 4, 6, 3, Some(4), 0.0, &mut rng);
    let c = random(&[5, 4], 6);
    check_layer(&store, &random(&[5, 4], 5), |ctx, v| {
        let y = plain.forward(ctx, v, None)?;
        let cv = ctx.tape.constant(c.clone());
        skip.forward(ctx, y, Some(cv))
    });
}

#[test]
fn gate_add_norm_gradient() {
    let mut store = ParamStore::new();
    let gan = GateAddNorm::new(&mut store, "gan", 4, &mut rng_from_seed(7));
    let r = random(&[3, 4], 8);
    check_layer(&store, &random(&[3, 4], 9), |ctx, v| {
        let rv = ctx.tape.constant(r.clone());
        gan.forward(ctx, v, rv)
    });
}

#[test]
fn variable_selection_gradient() {
    let mut store = ParamStore::new();
    let vs = VariableSelector::new(&mut store, "vs", 3, 4, true, 0.0, &mut rng_from_seed(10));
    let c = random(&[5, 4], 11);
    // input packs the three channel embeddings side by side
    check_layer(&store, &random(&[5, 12], 12), |ctx, v| {
        let parts = (0..3)
            .map(|j| ctx.tape.narrow(v, 1, 4 * j, 4))
            .collect::<Result<Vec<_>>>()?;
        let cv = ctx.tape.constant(c.clone());
        let (combined, weights) = vs.select(ctx, &parts, Some(cv))?;
        ctx.tape.concat(&[combined, weights], 1)
    });
}

#[test]
fn static_encoder_gradient() {
    let mut store = ParamStore::new();
    let enc = PriorKnowledgeEncoder::new(&mut store, 2, 4, 0.0, &mut rng_from_seed(13));
    check_layer(&store, &random(&[3, 8], 14), |ctx, v| {
        let a = ctx.tape.narrow(v, 1, 0, 4)?;
        let b = ctx.tape.narrow(v, 1, 4, 4)?;
        let (c, w) = enc.encode(ctx, &[a, b])?;
        ctx.tape.concat(&[c.selection, c.cell, c.hidden, c.enrichment, w], 1)
    });
}

#[test]
fn lstm_three_steps_gradient() {
    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "lstm", 3, 4, &mut rng_from_seed(15));
    let h0 = random(&[2, 4], 16);
    let c0 = random(&[2, 4], 17);
    check_layer(&store, &random(&[2, 9], 18), |ctx, v| {
        let mut h = ctx.tape.constant(h0.clone());
        let mut c = ctx.tape.constant(c0.clone());
        let mut outs = Vec::new();
        for t in 0..3 {
            let x = ctx.tape.narrow(v, 1, 3 * t, 3)?;
            (h, c) = cell.step(ctx, x, h, c)?;
            outs.push(h);
        }
        outs.push(c);
        ctx.tape.concat(&outs, 1)
    });
}

#[test]
fn interpretable_attention_gradient() {
    let mut store = ParamStore::new();
    let mha = InterpretableAttention::new(&mut store, "mha", 4, 2, &mut rng_from_seed(19));
    let mask = CausalMask::new(5);
    check_layer(&store, &random(&[2, 5, 4], 20), |ctx, v| {
        let (out, attn) = mha.forward(ctx, v, &mask)?;
        let a = ctx.tape.reshape(out, &[2, 20])?;
        let b = ctx.tape.reshape(attn, &[2, 25])?;
        ctx.tape.concat(&[a, b], 1)
    });
}
