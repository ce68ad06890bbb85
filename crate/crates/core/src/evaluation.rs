//! Point and interval metrics, cross-site correlation, the persistence
//! baseline, importance aggregation and the scenario harness.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    chronological_windows, index_statics, series_split_point, SeriesDataset, Window, WindowBatch,
};
use crate::error::{LfitError, Result};
use crate::model::{lfit_forward, Explanation, Forecast, LfitConfig, LfitModel};
use crate::scenario::{apply_scenario, ScenarioSpec};
use crate::tensor::Tensor;
use crate::training::{train_on_dataset, TrainConfig, TrainingLog};
use crate::math;

/// Point metrics over a set of (prediction, actual) pairs. Ratio metrics are
/// `None` when every point had to be skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub count: usize,
    pub mae: f64,
    /// Fraction, not percent.
    pub mape: Option<f64>,
    pub rmse: f64,
    /// Percent.
    pub smape: Option<f64>,
    pub mape_skipped: usize,
    pub smape_skipped: usize,
}

/// MAE, MAPE (skips `y = 0`), RMSE and sMAPE (skips `y + ỹ = 0`).
pub fn point_metrics(pred: &[f64], actual: &[f64]) -> Result<MetricValues> {
    if pred.len() != actual.len() || pred.is_empty() {
        return Err(LfitError::Shape {
            op: "compute_metrics",
            lhs: vec![pred.len()],
            rhs: vec![actual.len()],
        });
    }
    let n = pred.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let (mut ape, mut ape_n, mut sape, mut sape_n) = (0.0, 0usize, 0.0, 0usize);
    for (&p, &y) in pred.iter().zip(actual) {
        let e = (y - p).abs();
        abs += e;
        sq += e * e;
        if y != 0.0 {
            ape += e / y.abs();
            ape_n += 1;
        }
        if y + p != 0.0 {
            sape += e / ((y + p).abs() / 2.0);
            sape_n += 1;
        }
    }
    let skipped = pred.len() - ape_n;
    if skipped > 0 {
        info!("MAPE skipped {skipped} zero targets");
    }
    let mae = abs / n;
    let rmse = math::sqrt(sq / n);
    let v = MetricValues {
        count: pred.len(),
        mae,
        mape: (ape_n > 0).then(|| ape / ape_n as f64),
        rmse,
        smape: (sape_n > 0).then(|| 100.0 * sape / sape_n as f64),
        mape_skipped: skipped,
        smape_skipped: pred.len() - sape_n,
    };
    if v.rmse + 1e-12 * v.rmse.max(1.0) < v.mae {
        return Err(LfitError::Contract(format!("RMSE {} < MAE {}", v.rmse, v.mae)));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalCoverage {
    pub lower: f64,
    pub upper: f64,
    pub nominal: f64,
    pub empirical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub targets: Vec<String>,
    /// `[target][horizon step]`.
    pub per_step: Vec<Vec<MetricValues>>,
    pub per_target: Vec<MetricValues>,
    /// Pooled over all targets and steps.
    pub overall: MetricValues,
    /// Fraction of forecast vectors whose quantiles are not non-decreasing.
    pub crossing_rate: Option<f64>,
    pub coverage: Vec<IntervalCoverage>,
}

/// Metrics of point forecasts `pred` against `actual`, both `[B, m, τ]`.
pub fn compute_metrics(pred: &[f64], actual: &[f64], targets: &[String], horizon: usize) -> Result<MetricReport> {
    let m = targets.len();
    if m == 0 || horizon == 0 || pred.len() != actual.len() || pred.len() % (m * horizon) != 0 || pred.is_empty() {
        return Err(LfitError::Shape {
            op: "compute_metrics",
            lhs: vec![pred.len()],
            rhs: vec![actual.len(), m, horizon],
        });
    }
    let b = pred.len() / (m * horizon);
    let pick = |ti: usize, step: Option<usize>| -> (Vec<f64>, Vec<f64>) {
        let mut p = Vec::new();
        let mut a = Vec::new();
        for bi in 0..b {
            for s in 0..horizon {
                if step.is_some_and(|x| x != s) {
                    continue;
                }
                let i = (bi * m + ti) * horizon + s;
                p.push(pred[i]);
                a.push(actual[i]);
            }
        }
        (p, a)
    };
    let mut per_step = Vec::with_capacity(m);
    let mut per_target = Vec::with_capacity(m);
    for ti in 0..m {
        let mut row = Vec::with_capacity(horizon);
        for s in 0..horizon {
            let (p, a) = pick(ti, Some(s));
            row.push(point_metrics(&p, &a)?);
        }
        per_step.push(row);
        let (p, a) = pick(ti, None);
        per_target.push(point_metrics(&p, &a)?);
    }
    Ok(MetricReport {
        targets: targets.to_vec(),
        per_step,
        per_target,
        overall: point_metrics(pred, actual)?,
        crossing_rate: None,
        coverage: vec![],
    })
}

/// Full report for quantile forecasts; the median (or nearest) quantile is
/// the point forecast. `actual` is `[B, m, τ]`.
pub fn evaluate_forecasts(forecasts: &[Forecast], actual: &[f64], targets: &[String]) -> Result<MetricReport> {
    let Some(first) = forecasts.first() else {
        return Err(LfitError::Data("no forecasts to evaluate".into()));
    };
    let quantiles = &first.quantiles;
    let (m, tau, q) = (first.values.shape()[0], first.values.shape()[1], quantiles.len());
    let mid = median_index(quantiles);
    let mut pred = Vec::with_capacity(forecasts.len() * m * tau);
    let mut crossings = 0usize;
    let pairs = q / 2;
    let mut inside = vec![0usize; pairs];
    for (bi, f) in forecasts.iter().enumerate() {
        let d = f.values.data();
        for ti in 0..m {
            for s in 0..tau {
                let base = (ti * tau + s) * q;
                let row = &d[base..base + q];
                pred.push(row[mid]);
                if row.windows(2).any(|w| w[1] < w[0]) {
                    crossings += 1;
                }
                let y = actual[(bi * m + ti) * tau + s];
                for (p, n) in inside.iter_mut().enumerate() {
                    let (lo, hi) = (row[p].min(row[q - 1 - p]), row[p].max(row[q - 1 - p]));
                    if y >= lo && y <= hi {
                        *n += 1;
                    }
                }
            }
        }
    }
    let mut report = compute_metrics(&pred, actual, targets, tau)?;
    let total = pred.len() as f64;
    report.crossing_rate = Some(crossings as f64 / total);
    report.coverage = (0..pairs)
        .map(|p| IntervalCoverage {
            lower: quantiles[p],
            upper: quantiles[q - 1 - p],
            nominal: quantiles[q - 1 - p] - quantiles[p],
            empirical: inside[p] as f64 / total,
        })
        .collect();
    Ok(report)
}

fn median_index(quantiles: &[f64]) -> usize {
    let mut best = 0;
    for (i, q) in quantiles.iter().enumerate() {
        if (q - 0.5).abs() < (quantiles[best] - 0.5).abs() {
            best = i;
        }
    }
    best
}

/// Opt-in repair: sorts every quantile vector ascending.
pub fn sort_quantiles(forecasts: &mut [Forecast]) {
    for f in forecasts {
        let q = f.quantiles.len();
        for row in f.values.data_mut().chunks_mut(q) {
            row.sort_by(|a, b| a.total_cmp(b));
        }
    }
}

/// Pairwise Pearson correlation of `channel` between series over their
/// common steps; `None` where fewer than 3 common points or zero variance.
pub fn pearson_matrix(ds: &SeriesDataset, channel: &str) -> Result<Vec<Vec<Option<f64>>>> {
    let c = ds
        .channel_index(channel)
        .ok_or_else(|| LfitError::Contract(format!("unknown channel {channel}")))?;
    let n = ds.series.len();
    if n < 2 {
        return Err(LfitError::Data("correlation needs at least two series".into()));
    }
    let mut out = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let (a, b) = (&ds.series[i], &ds.series[j]);
            let lo = a.steps[0].max(b.steps[0]);
            let hi = (*a.steps.last().unwrap()).min(*b.steps.last().unwrap());
            if hi - lo + 1 < 3 {
                warn!("series {} and {} share fewer than 3 steps", a.id, b.id);
                continue;
            }
            let xa = &a.values[c][(lo - a.steps[0]) as usize..=(hi - a.steps[0]) as usize];
            let xb = &b.values[c][(lo - b.steps[0]) as usize..=(hi - b.steps[0]) as usize];
            let r = pearson(xa, xb);
            if r.is_none() {
                warn!("zero variance in {channel} of {} or {}", a.id, b.id);
            }
            let r = if i == j { r.map(|_| 1.0) } else { r };
            out[i][j] = r;
            out[j][i] = r;
        }
    }
    Ok(out)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, mb) = (math::mean(a), math::mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / math::sqrt(saa * sbb)).clamp(-1.0, 1.0))
}

/// Last observed target value repeated over the horizon at every quantile.
pub fn persistence_baseline(batch: &WindowBatch, quantiles: &[f64]) -> Vec<Forecast> {
    let (k, tau, m, q) = (batch.encoder_len, batch.horizon, batch.n_targets(), quantiles.len());
    (0..batch.len())
        .map(|b| {
            let mut values = Vec::with_capacity(m * tau * q);
            for ti in 0..m {
                let last = batch.destandardize(b, ti, batch.past_continuous[ti][b * k + k - 1]);
                values.extend(core::iter::repeat_n(last, tau * q));
            }
            Forecast {
                values: Tensor::new(vec![m, tau, q], values).expect("baseline shape"),
                quantiles: quantiles.to_vec(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelImportance {
    pub channel: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSummary {
    pub past: Vec<ChannelImportance>,
    pub future: Vec<ChannelImportance>,
    pub statics: Vec<ChannelImportance>,
    /// Mean decoder attention on the position `lag` steps back; `None`
    /// where no decoder position reaches that lag.
    pub attention_by_lag: Vec<Option<f64>>,
    pub windows: usize,
}

impl ImportanceSummary {
    /// Channels of `group` ordered by decreasing mean weight.
    pub fn ranking(group: &[ChannelImportance]) -> Vec<&str> {
        let mut v: Vec<&ChannelImportance> = group.iter().collect();
        v.sort_by(|a, b| b.mean.total_cmp(&a.mean));
        v.into_iter().map(|c| c.channel.as_str()).collect()
    }
}

fn mean_std(name: &str, samples: &[f64]) -> ChannelImportance {
    let mean = math::mean(samples);
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / samples.len().max(1) as f64;
    ChannelImportance {
        channel: name.into(),
        mean,
        std: math::sqrt(var),
    }
}

/// Averages selection weights over time steps and windows, static weights over
/// windows, and decoder attention per lag.
pub fn aggregate_importance(
    explanations: &[Explanation],
    past_names: &[String],
    future_names: &[String],
    static_names: &[String],
    encoder_length: usize,
) -> Result<ImportanceSummary> {
    if explanations.is_empty() {
        return Err(LfitError::Data("no explanations to aggregate".into()));
    }
    let group = |get: &dyn Fn(&Explanation) -> &Tensor, names: &[String]| -> Result<Vec<ChannelImportance>> {
        let n = names.len();
        let mut samples = vec![Vec::new(); n];
        for e in explanations {
            let t = get(e);
            if n > 0 && t.last_dim() != n {
                return Err(LfitError::Contract(format!(
                    "explanation has {} channels, expected {n}",
                    t.last_dim()
                )));
            }
            for row in t.data().chunks(n.max(1)) {
                for (j, &w) in row.iter().enumerate() {
                    samples[j].push(w);
                }
            }
        }
        Ok(names.iter().zip(&samples).map(|(nm, s)| mean_std(nm, s)).collect())
    };
    let past = group(&|e: &Explanation| &e.past_variable_weights, past_names)?;
    let future = group(&|e: &Explanation| &e.future_variable_weights, future_names)?;
    let mut statics = Vec::new();
    if !static_names.is_empty() {
        let mut samples = vec![Vec::new(); static_names.len()];
        for e in explanations {
            if let Some(w) = &e.static_weights {
                for (j, &x) in w.iter().enumerate() {
                    samples[j].push(x);
                }
            }
        }
        statics = static_names.iter().zip(&samples).map(|(n, s)| mean_std(n, s)).collect();
    }
    let t_all = explanations[0].mean_attention.shape()[0];
    let mut sum = vec![0.0; t_all];
    let mut count = vec![0usize; t_all];
    for e in explanations {
        let a = e.mean_attention.data();
        for i in encoder_length..t_all {
            for j in 0..=i {
                sum[i - j] += a[i * t_all + j];
                count[i - j] += 1;
            }
        }
    }
    let attention_by_lag = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    Ok(ImportanceSummary {
        past,
        future,
        statics,
        attention_by_lag,
        windows: explanations.len(),
    })
}

/// Everything a scenario run produces.
#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    /// Dataset after the scenario's channel rewiring.
    pub dataset: SeriesDataset,
    pub model: LfitModel,
    pub log: TrainingLog,
    pub test_windows: Vec<Window>,
    pub forecasts: Vec<Forecast>,
    pub explanations: Vec<Explanation>,
    pub report: MetricReport,
    pub baseline_report: MetricReport,
    pub importance: ImportanceSummary,
}

/// Test batch over the trailing `test_fraction` of every series, scaled with
/// the model's training statistics.
pub fn test_batch(model: &LfitModel, ds: &SeriesDataset, test_fraction: f64) -> Result<WindowBatch> {
    let (k, tau) = (model.config.encoder_length, model.config.horizon);
    let windows = chronological_windows(ds, k, tau, 1, |l| (series_split_point(l, test_fraction), l));
    if windows.is_empty() {
        return Err(LfitError::Data(format!(
            "empty test split: the last {test_fraction} of each series is shorter than the horizon {tau}"
        )));
    }
    let idx = index_statics(ds, &model.vocabularies)?;
    WindowBatch::assemble(ds, &windows, &model.schema, &idx, &model.standardizer, k, tau, true)
}

/// Rewires channels, trains on everything before the test split, and
/// evaluates model and persistence baseline on the test split.
pub fn run_scenario(
    ds: &SeriesDataset,
    spec: &ScenarioSpec,
    model_cfg: &LfitConfig,
    train_cfg: &TrainConfig,
    test_fraction: f64,
    clock: &mut dyn FnMut() -> f64,
) -> Result<ScenarioOutcome> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(LfitError::Config("test fraction must lie in (0, 1)".into()));
    }
    let dataset = apply_scenario(ds, spec)?;
    let fit_part = dataset.truncated(|l| series_split_point(l, test_fraction));
    let (mut model, log) = train_on_dataset(&fit_part, model_cfg, train_cfg, clock)?;
    model.scenario = Some(spec.clone());
    let batch = test_batch(&model, &dataset, test_fraction)?;
    let (forecasts, explanations) = lfit_forward(&model, &batch, None)?;
    let actual = batch.future_targets_raw.as_ref().expect("test targets");
    let report = evaluate_forecasts(&forecasts, actual, &model.schema.targets)?;
    let baseline = persistence_baseline(&batch, &model.config.quantiles);
    let baseline_report = evaluate_forecasts(&baseline, actual, &model.schema.targets)?;
    let importance = aggregate_importance(
        &explanations,
        &model.schema.past_names(),
        &model.schema.future_names(),
        &model.schema.static_names(),
        model.config.encoder_length,
    )?;
    Ok(ScenarioOutcome {
        dataset,
        model,
        log,
        test_windows: batch.windows.clone(),
        forecasts,
        explanations,
        report,
        baseline_report,
        importance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_metrics() {
        let v = point_metrics(&[2.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(v.mae, 0.5);
        assert!((v.rmse - 0.5f64.sqrt()).abs() < 1e-15);
        let v = point_metrics(&[110.0], &[100.0]).unwrap();
        assert!((v.mape.unwrap() - 0.1).abs() < 1e-15);
        assert!((v.smape.unwrap() - 2000.0 / 210.0).abs() < 1e-12);
        let v = point_metrics(&[3.0, -1.0], &[3.0, -1.0]).unwrap();
        assert_eq!((v.mae, v.rmse, v.mape, v.smape), (0.0, 0.0, Some(0.0), Some(0.0)));
    }

    #[test]
    fn all_zero_targets_leave_mape_undefined() {
        let v = point_metrics(&[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(v.mape, None);
        assert_eq!(v.mape_skipped, 2);
        let v = point_metrics(&[0.0], &[0.0]).unwrap();
        assert_eq!(v.smape, None);
    }

    #[test]
    fn smape_is_symmetric() {
        let a = [1.0, 4.0, -2.0, 7.5];
        let b = [2.0, 3.0, 1.0, 7.0];
        let x = point_metrics(&a, &b).unwrap().smape.unwrap();
        let y = point_metrics(&b, &a).unwrap().smape.unwrap();
        assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn pearson_identities() {
        let y = [1.0, 3.0, 2.0, 5.0, 4.0];
        let lin: Vec<f64> = y.iter().map(|v| 2.0 * v + 3.0).collect();
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        assert!((pearson(&y, &y).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&y, &lin).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&y, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&y, &[2.0; 5]), None);
    }

    #[test]
    fn coverage_and_crossing() {
        let f = Forecast {
            values: Tensor::new(vec![1, 2, 3], vec![0.0, 1.0, 2.0, 3.0, 2.0, 4.0]).unwrap(),
            quantiles: vec![0.1, 0.5, 0.9],
        };
        let r = evaluate_forecasts(&[f], &[1.5, 10.0], &["y".into()]).unwrap();
        assert_eq!(r.crossing_rate, Some(0.5));
        assert_eq!(r.coverage.len(), 1);
        assert_eq!(r.coverage[0].empirical, 0.5);
        assert!((r.coverage[0].nominal - 0.8).abs() < 1e-15);
        assert_eq!(r.overall.mae, (0.5 + 8.0) / 2.0);
    }
}
