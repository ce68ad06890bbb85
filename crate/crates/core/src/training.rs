//! Standardization, the quantile objective, Adam and the early-stopping
//! training loop.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    chronological_windows, encode_statics, series_split_point, ChannelSchema, SeriesDataset,
    WindowBatch, TIME_INDEX,
};
use crate::error::{LfitError, Result};
use crate::layers::Ctx;
use crate::model::{LfitConfig, LfitModel};
use crate::params::ParamStore;
use crate::tape::{pinball, Tape};
use crate::tensor::Tensor;
use crate::{math, rng_from_seed};

/// Scaling of one continuous channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScaling {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    /// Anchored channels are expressed relative to the last encoder value
    /// of each window instead of the training mean.
    pub anchored: bool,
}

impl ChannelScaling {
    /// Reference value subtracted before scaling.
    pub fn offset(&self, anchor: f64) -> f64 {
        if self.anchored {
            anchor
        } else {
            self.mean
        }
    }

    pub fn transform(&self, x: f64, anchor: f64) -> f64 {
        (x - self.offset(anchor)) / self.std
    }

    pub fn invert(&self, z: f64, anchor: f64) -> f64 {
        self.offset(anchor) + self.std * z
    }
}

/// Per-channel population mean and standard deviation, fitted on the
/// training portion only. Channel order: dataset continuous channels, then
/// the time index when calendar features are on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub channels: Vec<ChannelScaling>,
}

impl Standardizer {
    /// `train_len(series_len)` gives the number of leading steps of each
    /// series that belong to the training split. Targets and cumulative
    /// channels are anchored when `anchor_cumulative` is set.
    pub fn fit(
        ds: &SeriesDataset,
        train_len: impl Fn(usize) -> usize,
        anchor_cumulative: bool,
    ) -> Result<Self> {
        let mut names = ds.continuous_channels();
        if ds.calendar {
            names.push(TIME_INDEX.into());
        }
        let n_ds = ds.continuous_channels().len();
        let mut channels = Vec::with_capacity(names.len());
        for (c, name) in names.iter().enumerate() {
            let mut sum = 0.0;
            let mut count = 0usize;
            for s in &ds.series {
                let n = train_len(s.len()).min(s.len());
                for t in 0..n {
                    sum += value(s, c, n_ds, t);
                    count += 1;
                }
            }
            if count == 0 {
                return Err(LfitError::Data("training split is empty".into()));
            }
            let mean = sum / count as f64;
            let mut ss = 0.0;
            for s in &ds.series {
                let n = train_len(s.len()).min(s.len());
                for t in 0..n {
                    let e = value(s, c, n_ds, t) - mean;
                    ss += e * e;
                }
            }
            let std = math::sqrt(ss / count as f64);
            if !(std > 0.0) || !std.is_finite() {
                return Err(LfitError::Data(format!(
                    "channel {name} is constant on the training split"
                )));
            }
            let anchored = anchor_cumulative
                && (c < ds.targets.len() || ds.cumulative.iter().any(|x| x == name));
            channels.push(ChannelScaling {
                name: name.clone(),
                mean,
                std,
                anchored,
            });
        }
        Ok(Self { channels })
    }

    pub fn channel(&self, name: &str) -> Option<&ChannelScaling> {
        self.channels.iter().find(|c| c.name == name)
    }
}

fn value(s: &crate::dataset::Series, c: usize, n_ds: usize, t: usize) -> f64 {
    if c < n_ds {
        s.values[c][t]
    } else {
        s.steps[t] as f64
    }
}

/// `max(q·(y−ỹ), (q−1)·(y−ỹ))`.
pub fn pinball_loss(pred: f64, target: f64, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(LfitError::Contract(format!("quantile {q} outside (0, 1)")));
    }
    Ok(pinball(pred, target, q))
}

/// Mean pinball loss of `forecasts [B, m, τ, Q]` against `targets [B, m, τ]`,
/// i.e. the sum over targets, quantiles and horizon divided by
/// `B·τ·m·|Q|`.
pub fn lfit_objective(forecasts: &[f64], targets: &[f64], quantiles: &[f64]) -> Result<f64> {
    let q = quantiles.len();
    if q == 0 || forecasts.len() != targets.len() * q || targets.is_empty() {
        return Err(LfitError::Shape {
            op: "lfit_objective",
            lhs: alloc::vec![forecasts.len()],
            rhs: alloc::vec![targets.len(), q],
        });
    }
    let mut total = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        for (j, &qq) in quantiles.iter().enumerate() {
            total += pinball_loss(forecasts[i * q + j], y, qq)?;
        }
    }
    Ok(total / forecasts.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        let z: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: z.clone(),
            v: z,
            step: 0,
        }
    }
}

/// Bias-corrected Adam with decoupled weight decay applied first.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(LfitError::Contract("adam: parameter, gradient and state counts differ".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        if g.len() != p.len() {
            return Err(LfitError::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: grads[i].shape().to_vec(),
            });
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            *w -= cfg.learning_rate * cfg.weight_decay * *w;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *w -= cfg.learning_rate * mh / (math::sqrt(vh) + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub window_stride: usize,
    /// Express targets and cumulative channels relative to the last encoder value.
    pub anchor_cumulative: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            max_epochs: 100,
            early_stop_patience: 10,
            seed: 0,
            validation_fraction: 0.2,
            window_stride: 1,
            anchor_cumulative: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(LfitError::Config("batch_size must be >= 1".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(LfitError::Config("early_stop_patience must be >= 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(LfitError::Config("validation_fraction must lie in (0, 1)".into()));
        }
        if self.window_stride == 0 {
            return Err(LfitError::Config("window_stride must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(LfitError::Config("learning_rate must be > 0, weight_decay >= 0".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_objective: f64,
    pub val_objective: f64,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Training objective before the first update, dropout off.
    pub initial_objective: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_objective: f64,
    pub stopped_early: bool,
}

/// Objective over a whole batch with dropout off, evaluated in chunks.
pub fn evaluate_objective(model: &LfitModel, batch: &WindowBatch, chunk: usize) -> Result<f64> {
    let n = batch.len();
    if n == 0 {
        return Err(LfitError::Data("cannot evaluate an empty batch".into()));
    }
    let mut total = 0.0;
    let rows: Vec<usize> = (0..n).collect();
    for part in rows.chunks(chunk.max(1)) {
        let sub = batch.subset(part);
        let mut tape = Tape::new();
        let mut ctx = Ctx::eval(&mut tape, &model.store);
        let loss = model.loss(&mut ctx, &sub)?;
        total += tape.value(loss).item()? * part.len() as f64;
    }
    Ok(total / n as f64)
}

/// Mini-batch Adam with early stopping on `val`; restores the best parameters.
/// `clock` returns seconds since an arbitrary origin.
pub fn train(
    model: &mut LfitModel,
    train_batch: &WindowBatch,
    val_batch: &WindowBatch,
    cfg: &TrainConfig,
    clock: &mut dyn FnMut() -> f64,
) -> Result<TrainingLog> {
    cfg.validate()?;
    if train_batch.is_empty() {
        return Err(LfitError::Data("no training windows".into()));
    }
    if val_batch.is_empty() {
        return Err(LfitError::Data("no validation windows".into()));
    }
    let start = clock();
    let adam = cfg.adam();
    let mut rng = rng_from_seed(cfg.seed ^ 0x5EED_7A1E);
    let mut state = AdamState::zeros_like(model.store.values());
    let initial_objective = evaluate_objective(model, train_batch, cfg.batch_size)?;
    let mut best: (f64, usize, ParamStore) = (f64::INFINITY, 0, model.store.clone());
    let mut epochs = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_batch.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for part in order.chunks(cfg.batch_size) {
            let sub = train_batch.subset(part);
            let mut tape = Tape::new();
            let loss = {
                let mut ctx = Ctx::train(&mut tape, &model.store, &mut rng);
                model.loss(&mut ctx, &sub)?
            };
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(LfitError::Data(format!("training objective diverged at epoch {epoch}")));
            }
            sum += value * part.len() as f64;
            let grads = tape.backward(loss)?;
            let g = tape.param_grads(&grads, &model.store);
            drop(tape);
            adam_step(model.store.values_mut(), &g, &mut state, &adam)?;
        }
        let train_objective = sum / train_batch.len() as f64;
        let val_objective = evaluate_objective(model, val_batch, cfg.batch_size)?;
        let elapsed_seconds = clock() - start;
        debug!("epoch {epoch}: train {train_objective:.6} val {val_objective:.6}");
        epochs.push(EpochRecord {
            epoch,
            train_objective,
            val_objective,
            elapsed_seconds,
        });
        if val_objective < best.0 {
            best = (val_objective, epoch, model.store.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                stopped_early = true;
                info!("early stop after epoch {epoch}, best epoch {}", best.1);
                break;
            }
        }
    }
    let (best_val_objective, best_epoch, params) = best;
    if best_epoch > 0 {
        model.store = params;
    }
    Ok(TrainingLog {
        initial_objective,
        epochs,
        best_epoch,
        best_val_objective,
        stopped_early,
    })
}

/// Window batches and fitted preprocessing for a dataset.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub schema: ChannelSchema,
    pub vocabularies: Vec<crate::dataset::Vocabulary>,
    pub static_index: Vec<Vec<usize>>,
    pub standardizer: Standardizer,
    pub train: WindowBatch,
    pub validation: WindowBatch,
}

/// Chronological split per series: training windows end before the last
/// `validation_fraction` of steps, validation windows forecast inside it.
pub fn prepare_data(ds: &SeriesDataset, model_cfg: &LfitConfig, cfg: &TrainConfig) -> Result<PreparedData> {
    model_cfg.validate()?;
    cfg.validate()?;
    let (k, tau) = (model_cfg.encoder_length, model_cfg.horizon);
    let frac = cfg.validation_fraction;
    let (vocabularies, static_index) = encode_statics(ds)?;
    let schema = ChannelSchema::from_dataset(ds, &vocabularies);
    let standardizer = Standardizer::fit(ds, |l| series_split_point(l, frac), cfg.anchor_cumulative)?;
    let train_w = chronological_windows(ds, k, tau, cfg.window_stride, |l| (0, series_split_point(l, frac)));
    let val_w = chronological_windows(ds, k, tau, cfg.window_stride, |l| (series_split_point(l, frac), l));
    if train_w.is_empty() {
        return Err(LfitError::Data(format!(
            "no training windows: series too short for encoder length {k} + horizon {tau} before the validation split"
        )));
    }
    if val_w.is_empty() {
        return Err(LfitError::Data(format!(
            "no validation windows: the last {frac} of each series is shorter than the horizon {tau}"
        )));
    }
    let train = WindowBatch::assemble(ds, &train_w, &schema, &static_index, &standardizer, k, tau, true)?;
    let validation = WindowBatch::assemble(ds, &val_w, &schema, &static_index, &standardizer, k, tau, true)?;
    Ok(PreparedData {
        schema,
        vocabularies,
        static_index,
        standardizer,
        train,
        validation,
    })
}

/// Splits, builds and trains a model on `ds`.
pub fn train_on_dataset(
    ds: &SeriesDataset,
    model_cfg: &LfitConfig,
    cfg: &TrainConfig,
    clock: &mut dyn FnMut() -> f64,
) -> Result<(LfitModel, TrainingLog)> {
    let data = prepare_data(ds, model_cfg, cfg)?;
    info!(
        "training on {} windows, validating on {}",
        data.train.len(),
        data.validation.len()
    );
    let mut model = LfitModel::new(
        model_cfg.clone(),
        data.schema,
        data.vocabularies,
        data.standardizer,
        cfg.seed,
    )?;
    let log = train(&mut model, &data.train, &data.validation, cfg, clock)?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Series;
    use alloc::vec;
    use rand::Rng as _;

    #[test]
    fn pinball_examples() {
        assert_eq!(pinball_loss(1.0, 1.0, 0.3).unwrap(), 0.0);
        assert!((pinball_loss(0.0, 1.0, 0.9).unwrap() - 0.9).abs() < 1e-15);
        assert!((pinball_loss(1.0, 0.0, 0.9).unwrap() - 0.1).abs() < 1e-15);
        assert!(pinball_loss(0.0, 1.0, 1.0).is_err());
        assert!(pinball_loss(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn objective_examples() {
        let q = [0.1, 0.5, 0.9];
        assert_eq!(lfit_objective(&[2.0, 2.0, 2.0], &[2.0], &q).unwrap(), 0.0);
        let single = lfit_objective(&[0.0], &[1.0], &[0.9]).unwrap();
        assert_eq!(single, pinball_loss(0.0, 1.0, 0.9).unwrap());
        let f = [0.3, 0.1, -0.4, 1.2, 0.0, 2.0];
        let y = [0.5, 1.0];
        let one = lfit_objective(&f, &y, &q).unwrap();
        let f2: Vec<f64> = f.iter().chain(f.iter()).copied().collect();
        let y2: Vec<f64> = y.iter().chain(y.iter()).copied().collect();
        assert!((lfit_objective(&f2, &y2, &q).unwrap() - one).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_grad_no_decay_is_noop() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let g = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::zeros_like(&p);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let mut p = vec![Tensor::vector(vec![0.5, 0.5, 0.5])];
        let g = vec![Tensor::vector(vec![3.0, -0.01, 100.0])];
        let mut st = AdamState::zeros_like(&p);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        for (w, gi) in p[0].data().iter().zip(g[0].data()) {
            let step = w - 0.5;
            assert!((step + gi.signum() * 1e-3).abs() < 1e-8, "{step}");
        }
    }

    #[test]
    fn decoupled_decay_precedes_update() {
        let mut p = vec![Tensor::vector(vec![2.0])];
        let mut st = AdamState::zeros_like(&p);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        adam_step(&mut p, &[Tensor::zeros(&[1])], &mut st, &cfg).unwrap();
        assert!((p[0].data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn constant_minimizer_recovers_quantile() {
        let mut rng = rng_from_seed(11);
        let ys: Vec<f64> = (0..1000).map(|_| rng.random_range(-3.0..5.0)).collect();
        let mut sorted = ys.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for q in [0.1, 0.5, 0.9] {
            let mut p = vec![Tensor::vector(vec![0.0])];
            let mut st = AdamState::zeros_like(&p);
            let cfg = AdamConfig {
                learning_rate: 0.05,
                weight_decay: 0.0,
                ..Default::default()
            };
            for _ in 0..3000 {
                let c = p[0].data()[0];
                let g: f64 = ys
                    .iter()
                    .map(|&y| if y > c { -q } else if y < c { 1.0 - q } else { 0.0 })
                    .sum::<f64>()
                    / ys.len() as f64;
                adam_step(&mut p, &[Tensor::vector(vec![g])], &mut st, &cfg).unwrap();
            }
            let empirical = sorted[((q * ys.len() as f64).ceil() as usize).saturating_sub(1)];
            assert!((p[0].data()[0] - empirical).abs() <= 0.05, "q={q}");
        }
    }

    fn ds_with(values: Vec<Vec<f64>>) -> SeriesDataset {
        let n = values[0].len();
        SeriesDataset {
            targets: vec!["y".into()],
            observed: vec!["x".into()],
            known: vec![],
            static_attrs: vec![],
            cumulative: vec![],
            calendar: false,
            series: vec![Series {
                id: "a".into(),
                steps: (0..n as i64).collect(),
                months: vec![1; n],
                values,
                statics: vec![],
            }],
        }
    }

    #[test]
    fn standardizer_population_stats() {
        let ds = ds_with(vec![vec![0.0, 5.0], vec![1.0, 3.0]]);
        let s = Standardizer::fit(&ds, |l| l, false).unwrap();
        let x = &s.channels[1];
        assert_eq!((x.mean, x.std), (2.0, 1.0));
        assert_eq!(x.transform(1.0, 0.0), -1.0);
        assert_eq!(x.transform(3.0, 0.0), 1.0);
        for v in [-3.7, 0.0, 12.25] {
            assert!((x.invert(x.transform(v, 0.0), 0.0) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn standardizer_uses_training_prefix_only() {
        let ds = ds_with(vec![vec![0.0, 5.0, 9.0, 1.0], vec![1.0, 3.0, 100.0, 200.0]]);
        let s = Standardizer::fit(&ds, |_| 2, false).unwrap();
        assert_eq!((s.channels[1].mean, s.channels[1].std), (2.0, 1.0));
    }

    #[test]
    fn constant_channel_is_data_error() {
        let ds = ds_with(vec![vec![0.0, 5.0], vec![4.0, 4.0]]);
        let err = Standardizer::fit(&ds, |l| l, false).unwrap_err();
        assert!(matches!(err, LfitError::Data(m) if m.contains('x')));
    }

    #[test]
    fn anchored_channel_roundtrip() {
        let ds = ds_with(vec![vec![0.0, 5.0, 7.0], vec![1.0, 3.0, 2.0]]);
        let s = Standardizer::fit(&ds, |l| l, true).unwrap();
        let y = &s.channels[0];
        assert!(y.anchored && !s.channels[1].anchored);
        assert_eq!(y.transform(5.0, 5.0), 0.0);
        assert!((y.invert(y.transform(6.5, 5.0), 5.0) - 6.5).abs() < 1e-12);
    }
}
