use lfit_core::dataset::{
    build_windows, encode_statics, generate_synthetic, ChannelSchema, ResponseMode, SeriesDataset,
    SyntheticSpec, WindowBatch,
};
use lfit_core::gradcheck::{param_gradient_pairs, relative_error};
use lfit_core::layers::Ctx;
use lfit_core::model::{extract_explanation, forecast, lfit_forward, LfitConfig, LfitModel};
use lfit_core::params::ParamId;
use lfit_core::serialize::{load_model, save_model};
use lfit_core::training::Standardizer;
use lfit_core::{rng_from_seed, LfitError, Tape};

fn tiny_dataset(seed: u64) -> SeriesDataset {
    generate_synthetic(&SyntheticSpec {
        series_count: 3,
        length: 40,
        seed,
        ..Default::default()
    })
    .unwrap()
    .0
}

fn tiny_config() -> LfitConfig {
    LfitConfig {
        d_model: 4,
        head_count: 2,
        encoder_length: 6,
        horizon: 3,
        quantiles: vec![0.1, 0.5, 0.9],
        dropout_rate: 0.1,
    }
}

fn setup(ds: &SeriesDataset, cfg: &LfitConfig, seed: u64) -> (LfitModel, Vec<Vec<usize>>) {
    let (vocabs, idx) = encode_statics(ds).unwrap();
    let schema = ChannelSchema::from_dataset(ds, &vocabs);
    let st = Standardizer::fit(ds, |l| l, true).unwrap();
    (LfitModel::new(cfg.clone(), schema, vocabs, st, seed).unwrap(), idx)
}

fn batch_of(ds: &SeriesDataset, model: &LfitModel, idx: &[Vec<usize>], n: usize) -> WindowBatch {
    let c = &model.config;
    let w = build_windows(ds, c.encoder_length, c.horizon, 5).unwrap();
    let w: Vec<_> = w.into_iter().take(n).collect();
    WindowBatch::assemble(ds, &w, &model.schema, idx, &model.standardizer, c.encoder_length, c.horizon, true)
        .unwrap()
}

#[test]
fn forecast_shape_contract() {
    let ds = tiny_dataset(1);
    let cfg = tiny_config();
    let (model, idx) = setup(&ds, &cfg, 3);
    let batch = batch_of(&ds, &model, &idx, 5);
    let mut tape = Tape::new();
    let mut ctx = Ctx::eval(&mut tape, &model.store);
    let fv = model.forward_vars(&mut ctx, &batch).unwrap();
    assert_eq!(tape.shape(fv.prediction), &[5, 1, 3, 3]);
    let (f, e) = lfit_forward(&model, &batch, None).unwrap();
    assert_eq!(f.len(), 5);
    assert_eq!(f[0].values.shape(), &[1, 3, 3]);
    assert!(f.iter().all(|x| x.values.is_finite()));
    assert_eq!(e[0].mean_attention.shape(), &[9, 9]);
    assert_eq!(e[0].past_variable_weights.shape(), &[6, model.schema.n_past()]);
    assert_eq!(e[0].future_variable_weights.shape(), &[3, 3]);
    assert_eq!(e[0].static_weights.as_ref().unwrap().len(), 2);
}

#[test]
fn identical_elements_identical_outputs() {
    let ds = tiny_dataset(2);
    let (model, idx) = setup(&ds, &tiny_config(), 4);
    let batch = batch_of(&ds, &model, &idx, 1).subset(&[0, 0]);
    let (f, e) = lfit_forward(&model, &batch, None).unwrap();
    assert_eq!(f[0], f[1]);
    assert_eq!(e[0], e[1]);
}

#[test]
fn full_model_gradient() {
    let ds = tiny_dataset(3);
    let mut cfg = tiny_config();
    cfg.dropout_rate = 0.0;
    let (model, idx) = setup(&ds, &cfg, 5);
    let batch = batch_of(&ds, &model, &idx, 2);
    let mut coords = Vec::new();
    for p in 0..model.store.len() {
        let n = model.store.get(ParamId(p)).len();
        for i in [0, n / 2, n - 1] {
            coords.push((ParamId(p), i));
        }
    }
    coords.dedup();
    // smooth readout so finite differences never straddle a pinball kink
    let readout = |tape: &mut Tape, store: &lfit_core::params::ParamStore| {
        let mut ctx = Ctx::eval(tape, store);
        let fv = model.forward_vars(&mut ctx, &batch)?;
        let n = ctx.tape.value(fv.prediction).len();
        let w: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let p = ctx.tape.mul_const(fv.prediction, w)?;
        Ok(ctx.tape.sum(p))
    };
    let (rel, abs) = gradient_errors(&param_gradient_pairs(&model.store, readout, 1e-5, &coords).unwrap());
    assert!(rel <= 1e-3 && abs <= 1e-8, "readout: relative {rel}, unresolved absolute {abs}");
    let loss = |tape: &mut Tape, store: &lfit_core::params::ParamStore| {
        let mut ctx = Ctx::eval(tape, store);
        model.loss(&mut ctx, &batch)
    };
    let (rel, abs) = gradient_errors(&param_gradient_pairs(&model.store, loss, 1e-5, &coords).unwrap());
    assert!(rel <= 1e-3 && abs <= 1e-8, "loss: relative {rel}, unresolved absolute {abs}");
}

/// Relative error over probes with a gradient above the finite-difference
/// resolution, absolute error over the rest.
fn gradient_errors(pairs: &[(f64, f64)]) -> (f64, f64) {
    let (mut rel, mut abs) = (0.0f64, 0.0f64);
    for &(a, n) in pairs {
        if a.abs().max(n.abs()) >= 1e-6 {
            rel = rel.max(relative_error(a, n));
        } else {
            abs = abs.max((a - n).abs());
        }
    }
    (rel, abs)
}

#[test]
fn future_targets_and_post_window_covariates_do_not_leak() {
    let ds = tiny_dataset(4);
    let (model, idx) = setup(&ds, &tiny_config(), 6);
    let c = &model.config;
    let windows: Vec<_> = build_windows(&ds, c.encoder_length, c.horizon, 7).unwrap();
    let assemble = |d: &SeriesDataset| {
        WindowBatch::assemble(d, &windows, &model.schema, &idx, &model.standardizer, c.encoder_length, c.horizon, true)
            .unwrap()
    };
    let base = forecast(&model, &assemble(&ds)).unwrap();
    for w in &windows {
        let mut perturbed = ds.clone();
        let s = &mut perturbed.series[w.series];
        let end = w.start + c.encoder_length;
        // targets and observed covariates from the forecast origin on
        for ch in 0..1 + ds.observed.len() {
            for v in &mut s.values[ch][end..] {
                *v += 1000.0;
            }
        }
        let out = forecast(&model, &assemble(&perturbed)).unwrap();
        let i = windows.iter().position(|x| x == w).unwrap();
        assert_eq!(out[i], base[i]);
    }
}

#[test]
fn save_load_roundtrip_is_bit_exact() {
    let ds = tiny_dataset(5);
    let (mut model, idx) = setup(&ds, &tiny_config(), 7);
    model.scenario = Some(lfit_core::scenario::ScenarioSpec::new(lfit_core::scenario::Scenario::MtMpcPkEv));
    let batch = batch_of(&ds, &model, &idx, 3);
    let bytes = save_model(&model).unwrap();
    let loaded = load_model(&bytes).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(loaded.config.quantiles, vec![0.1, 0.5, 0.9]);
    assert_eq!(loaded.vocabularies, model.vocabularies);
    assert_eq!(forecast(&loaded, &batch).unwrap(), forecast(&model, &batch).unwrap());
    assert_eq!(save_model(&loaded).unwrap(), bytes);

    let mut bad = bytes.clone();
    bad[8] = 99;
    assert!(matches!(load_model(&bad), Err(LfitError::Version { found: 99, .. })));
    assert!(matches!(load_model(&bytes[..bytes.len() - 3]), Err(LfitError::Format(_))));
    assert!(matches!(load_model(b"garbage!"), Err(LfitError::Format(_))));
}

#[test]
fn no_statics_still_finite() {
    let mut ds = tiny_dataset(6);
    ds.static_attrs.clear();
    for s in &mut ds.series {
        s.statics.clear();
    }
    let (model, idx) = setup(&ds, &tiny_config(), 8);
    assert!(!model.has_statics());
    let batch = batch_of(&ds, &model, &idx, 4);
    let (f, e) = lfit_forward(&model, &batch, None).unwrap();
    assert!(f.iter().all(|x| x.values.is_finite()));
    assert!(e.iter().all(|x| x.static_weights.is_none()));
}

#[test]
fn untrained_explanations_reproducible() {
    let ds = tiny_dataset(7);
    let (a, idx) = setup(&ds, &tiny_config(), 9);
    let (b, _) = setup(&ds, &tiny_config(), 9);
    let batch = batch_of(&ds, &a, &idx, 3);
    assert_eq!(extract_explanation(&a, &batch).unwrap(), extract_explanation(&b, &batch).unwrap());
}

#[test]
fn dropout_only_with_rng() {
    let ds = tiny_dataset(8);
    let (model, idx) = setup(&ds, &tiny_config(), 10);
    let batch = batch_of(&ds, &model, &idx, 2);
    let eval = forecast(&model, &batch).unwrap();
    let mut rng = rng_from_seed(1);
    let (train, _) = lfit_forward(&model, &batch, Some(&mut rng)).unwrap();
    assert_ne!(eval, train);
}

#[test]
fn schema_mismatch_and_bad_input_are_reported() {
    let ds = tiny_dataset(9);
    let (model, idx) = setup(&ds, &tiny_config(), 11);
    let mut batch = batch_of(&ds, &model, &idx, 2);
    batch.future_continuous.pop();
    assert!(matches!(forecast(&model, &batch), Err(LfitError::Contract(_))));

    let mut batch = batch_of(&ds, &model, &idx, 2);
    batch.past_continuous[1][3] = f64::NAN;
    match forecast(&model, &batch) {
        Err(LfitError::Data(m)) => assert!(m.contains("water_level"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn water_only_dataset_builds() {
    let ds = generate_synthetic(&SyntheticSpec {
        series_count: 2,
        length: 30,
        modes: vec![ResponseMode::WaterDriven],
        ..Default::default()
    })
    .unwrap()
    .0;
    let (model, idx) = setup(&ds, &tiny_config(), 12);
    assert!(forecast(&model, &batch_of(&ds, &model, &idx, 2)).is_ok());
}
