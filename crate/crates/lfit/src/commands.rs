//! The five CLI commands. Each one writes into the run directory `cfg.out`
//! and leaves a `manifest-<command>.json` naming its inputs and outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lfit_core::dataset::{
    extend_for_forecast, generate_synthetic, index_statics, series_split_point, GroundTruth,
    IngestOptions, SeriesDataset, SyntheticSpec, Window, WindowBatch,
};
use lfit_core::evaluation::{
    aggregate_importance, evaluate_forecasts, persistence_baseline, test_batch, ImportanceSummary, MetricReport,
    MetricValues,
};
use lfit_core::model::{Explanation, Forecast, LfitModel};
use lfit_core::scenario::apply_scenario;
use lfit_core::serialize::{load_model, save_model};
use lfit_core::training::{train_on_dataset, TrainingLog};
use lfit_core::LfitError;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{fix_months, load_csv, write_dataset, write_json, DataSchema, Resolution};
use crate::error::{CliError, Result};
use crate::parallel::{forward_parallel, thread_count};
use crate::MODEL_FILE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    #[serde(default)]
    pub summary: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn digests(paths: &[PathBuf], base: Option<&Path>) -> Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            let shown = base.and_then(|b| p.strip_prefix(b).ok()).unwrap_or(p);
            Ok(FileDigest {
                path: shown.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

fn write_manifest(
    cfg: &RunConfig,
    command: &str,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    summary: serde_json::Value,
) -> Result<PathBuf> {
    let manifest = Manifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        config: cfg.clone(),
        inputs: digests(inputs, None)?,
        outputs: digests(outputs, Some(&cfg.out))?,
        summary,
    };
    let path = cfg.out.join(format!("manifest-{command}.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(CliError::io(p))
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(CliError::csv(path))?;
    w.write_record(header).map_err(CliError::csv(path))?;
    for r in rows {
        w.write_record(&r).map_err(CliError::csv(path))?;
    }
    w.flush().map_err(CliError::io(path))
}

/// Dataset named by the config, with its step resolution and source files.
pub struct Inputs {
    pub dataset: SeriesDataset,
    pub resolution: Resolution,
    pub files: Vec<PathBuf>,
}

pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    cfg.check_source()?;
    if let Some(spec) = &cfg.synthetic {
        return Ok(Inputs {
            dataset: generate_synthetic(spec)?.0,
            resolution: Resolution::Monthly,
            files: vec![],
        });
    }
    let src = cfg.data.as_ref().expect("checked source");
    let schema = DataSchema::read(&src.schema)?;
    let opts = IngestOptions {
        max_missing_rate: cfg.max_missing_rate,
    };
    let (dataset, report) = load_csv(&src.csv, &schema, src.statics.as_deref(), &opts)?;
    for (id, rate) in &report.dropped {
        warn!("dropped series {id} (target missing rate {rate:.3})");
    }
    let mut files = vec![src.csv.clone(), src.schema.clone()];
    files.extend(src.statics.clone());
    Ok(Inputs {
        dataset,
        resolution: schema.resolution,
        files,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub spec: SyntheticSpec,
    pub series: Vec<GroundTruth>,
}

/// Writes a synthetic dataset, its schema and the true driver of every series.
pub fn cmd_generate(cfg: &RunConfig) -> Result<Vec<GroundTruth>> {
    let spec = cfg
        .synthetic
        .as_ref()
        .ok_or_else(|| CliError::Usage("generate needs a synthetic section in the config".into()))?;
    if cfg.data.is_some() {
        return Err(CliError::Usage("generate takes a synthetic section, not a data source".into()));
    }
    ensure_dir(&cfg.out)?;
    let (ds, truth) = generate_synthetic(spec)?;
    let mut outputs = write_dataset(&ds, &cfg.out)?;
    let gt = cfg.out.join("ground_truth.json");
    write_json(
        &gt,
        &GroundTruthFile {
            spec: spec.clone(),
            series: truth.clone(),
        },
    )?;
    outputs.push(gt);
    write_manifest(cfg, "generate", &[], &outputs, serde_json::json!({"series": truth.len()}))?;
    Ok(truth)
}

pub struct TrainOutcome {
    pub model: LfitModel,
    pub log: TrainingLog,
    pub model_path: PathBuf,
}

/// Trains on everything before the test split and saves the best-validation model.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.check()?;
    let inputs = load_inputs(cfg)?;
    let spec = cfg.scenario_spec()?;
    let ds = apply_scenario(&inputs.dataset, &spec)?;
    let fit = ds.truncated(|l| series_split_point(l, cfg.test_fraction));
    ensure_dir(&cfg.out)?;
    let start = Instant::now();
    let mut clock = || start.elapsed().as_secs_f64();
    let (mut model, log) = train_on_dataset(&fit, &cfg.model, &cfg.train, &mut clock)?;
    model.scenario = Some(spec);
    let model_path = cfg.out.join(MODEL_FILE);
    fs::write(&model_path, save_model(&model)?).map_err(CliError::io(&model_path))?;
    let log_path = cfg.out.join("training_log.csv");
    let first = vec![
        "0".into(),
        log.initial_objective.to_string(),
        String::new(),
        "0".into(),
    ];
    write_rows(
        &log_path,
        &["epoch", "train_objective", "val_objective", "elapsed_seconds"],
        std::iter::once(first).chain(log.epochs.iter().map(|e| {
            vec![
                e.epoch.to_string(),
                e.train_objective.to_string(),
                e.val_objective.to_string(),
                format!("{:.3}", e.elapsed_seconds),
            ]
        })),
    )?;
    info!(
        "best epoch {} with validation objective {:.5}",
        log.best_epoch, log.best_val_objective
    );
    write_manifest(
        cfg,
        "train",
        &inputs.files,
        &[model_path.clone()],
        serde_json::json!({
            "epochs": log.epochs.len(),
            "best_epoch": log.best_epoch,
            "best_val_objective": log.best_val_objective,
            "stopped_early": log.stopped_early,
        }),
    )?;
    Ok(TrainOutcome { model, log, model_path })
}

/// Saved model plus the dataset rewired for its scenario.
pub struct Prepared {
    pub model: LfitModel,
    pub dataset: SeriesDataset,
    pub resolution: Resolution,
    pub inputs: Vec<PathBuf>,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let path = cfg.model_file();
    let bytes = fs::read(&path).map_err(CliError::io(&path))?;
    let model = load_model(&bytes)?;
    let inputs = load_inputs(cfg)?;
    let spec = match &model.scenario {
        Some(s) => s.clone(),
        None => cfg.scenario_spec()?,
    };
    let dataset = apply_scenario(&inputs.dataset, &spec)?;
    model.schema.check_dataset(&dataset)?;
    let mut files = vec![path];
    files.extend(inputs.files);
    Ok(Prepared {
        model,
        dataset,
        resolution: inputs.resolution,
        inputs: files,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRow {
    pub series_id: String,
    pub target: String,
    pub step: usize,
    pub time_index: i64,
    pub quantile: f64,
    pub value: f64,
}

/// Forecasts beyond the end of every series from its last `k` steps.
pub fn forecast_rows(p: &Prepared, horizon: Option<usize>, threads: usize) -> Result<Vec<ForecastRow>> {
    let (k, tau) = (p.model.config.encoder_length, p.model.config.horizon);
    let h = horizon.unwrap_or(tau);
    if h == 0 || h > tau {
        return Err(LfitError::Config(format!("forecast horizon {h} must lie in 1..={tau}")).into());
    }
    let mut ext = extend_for_forecast(&p.dataset, tau)?;
    fix_months(&mut ext, p.resolution);
    let mut windows = Vec::new();
    for (i, s) in p.dataset.series.iter().enumerate() {
        if s.len() < k {
            warn!("series {} has {} steps, fewer than the encoder length {k}", s.id, s.len());
            continue;
        }
        windows.push(Window {
            series: i,
            start: s.len() - k,
        });
    }
    if windows.is_empty() {
        return Err(LfitError::Data(format!("no series has the {k} steps the encoder needs")).into());
    }
    let idx = index_statics(&ext, &p.model.vocabularies)?;
    let m = &p.model;
    let batch = WindowBatch::assemble(&ext, &windows, &m.schema, &idx, &m.standardizer, k, tau, false)?;
    let (forecasts, _) = forward_parallel(m, &batch, threads)?;
    let mut rows = Vec::new();
    for (w, f) in windows.iter().zip(&forecasts) {
        let s = &p.dataset.series[w.series];
        let last = *s.steps.last().expect("non-empty series");
        for (ti, target) in m.schema.targets.iter().enumerate() {
            for step in 0..h {
                for (qi, &q) in m.config.quantiles.iter().enumerate() {
                    rows.push(ForecastRow {
                        series_id: s.id.clone(),
                        target: target.clone(),
                        step: step + 1,
                        time_index: last + step as i64 + 1,
                        quantile: q,
                        value: f.at(ti, step, qi),
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn cmd_forecast(cfg: &RunConfig) -> Result<Vec<ForecastRow>> {
    let p = prepare(cfg)?;
    let rows = forecast_rows(&p, cfg.forecast_horizon, thread_count())?;
    ensure_dir(&cfg.out)?;
    let path = cfg.out.join("forecasts.csv");
    write_rows(
        &path,
        &["series_id", "target", "step", "time_index", "quantile", "value"],
        rows.iter().map(|r| {
            vec![
                r.series_id.clone(),
                r.target.clone(),
                r.step.to_string(),
                r.time_index.to_string(),
                r.quantile.to_string(),
                r.value.to_string(),
            ]
        }),
    )?;
    write_manifest(cfg, "forecast", &p.inputs, &[path], serde_json::json!({"rows": rows.len()}))?;
    Ok(rows)
}

/// Windows of the test split with their forecasts and explanations.
pub struct TestRun {
    pub batch: WindowBatch,
    pub forecasts: Vec<Forecast>,
    pub explanations: Vec<Explanation>,
}

pub fn run_test_split(p: &Prepared, test_fraction: f64, threads: usize) -> Result<TestRun> {
    let batch = test_batch(&p.model, &p.dataset, test_fraction)?;
    let (forecasts, explanations) = forward_parallel(&p.model, &batch, threads)?;
    Ok(TestRun {
        batch,
        forecasts,
        explanations,
    })
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

/// `series_step` of the forecast origin, safe as a file stem.
pub fn window_id(ds: &SeriesDataset, w: &Window, k: usize) -> String {
    let s = &ds.series[w.series];
    format!("{}_{}", file_safe(&s.id), s.steps[w.forecast_start(k)])
}

/// Aggregated importance over the test split plus one attention matrix per window.
pub fn cmd_explain(cfg: &RunConfig) -> Result<ImportanceSummary> {
    let p = prepare(cfg)?;
    let run = run_test_split(&p, cfg.test_fraction, thread_count())?;
    let schema = &p.model.schema;
    let k = p.model.config.encoder_length;
    let summary = aggregate_importance(
        &run.explanations,
        &schema.past_names(),
        &schema.future_names(),
        &schema.static_names(),
        k,
    )?;
    ensure_dir(&cfg.out)?;
    let mut outputs = Vec::new();
    let imp = cfg.out.join("importance.csv");
    let groups = [("past", &summary.past), ("future", &summary.future), ("static", &summary.statics)];
    write_rows(
        &imp,
        &["group", "channel", "mean", "std"],
        groups.iter().flat_map(|(g, rows)| {
            rows.iter()
                .map(move |c| vec![g.to_string(), c.channel.clone(), c.mean.to_string(), c.std.to_string()])
        }),
    )?;
    outputs.push(imp);
    let lags = cfg.out.join("attention_by_lag.csv");
    write_rows(
        &lags,
        &["lag", "weight"],
        summary
            .attention_by_lag
            .iter()
            .enumerate()
            .filter_map(|(l, w)| w.map(|w| vec![l.to_string(), w.to_string()])),
    )?;
    outputs.push(lags);
    let dir = cfg.out.join("attention");
    ensure_dir(&dir)?;
    for (w, e) in run.batch.windows.iter().zip(&run.explanations) {
        let path = dir.join(format!("{}.csv", window_id(&p.dataset, w, k)));
        let t = e.mean_attention.shape()[1];
        let mut wr = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(&path)
            .map_err(CliError::csv(&path))?;
        for row in e.mean_attention.data().chunks(t) {
            wr.write_record(row.iter().map(|v| v.to_string())).map_err(CliError::csv(&path))?;
        }
        wr.flush().map_err(CliError::io(&path))?;
        outputs.push(path);
    }
    write_manifest(
        cfg,
        "explain",
        &p.inputs,
        &outputs,
        serde_json::json!({"windows": summary.windows}),
    )?;
    Ok(summary)
}

pub struct Evaluation {
    pub report: MetricReport,
    pub baseline: Option<MetricReport>,
}

const METRIC_COLUMNS: [&str; 5] = ["count", "mae", "mape", "rmse", "smape"];

fn metric_cells(v: &MetricValues) -> Vec<String> {
    let opt = |x: Option<f64>| x.map_or(String::new(), |x| x.to_string());
    vec![
        v.count.to_string(),
        v.mae.to_string(),
        opt(v.mape),
        v.rmse.to_string(),
        opt(v.smape),
    ]
}

/// `scope,target,step,<metrics>[,baseline_<metrics>]` rows: overall, per
/// target, then per target and horizon step.
pub fn metric_rows(report: &MetricReport, baseline: Option<&MetricReport>) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header: Vec<String> = ["scope", "target", "step"].map(String::from).to_vec();
    header.extend(METRIC_COLUMNS.map(String::from));
    if baseline.is_some() {
        header.extend(METRIC_COLUMNS.map(|c| format!("baseline_{c}")));
    }
    let row = |scope: &str, target: &str, step: String, get: &dyn Fn(&MetricReport) -> &MetricValues| {
        let mut r = vec![scope.to_string(), target.to_string(), step];
        r.extend(metric_cells(get(report)));
        if let Some(b) = baseline {
            r.extend(metric_cells(get(b)));
        }
        r
    };
    let mut rows = vec![row("overall", "", String::new(), &|r| &r.overall)];
    for (ti, t) in report.targets.iter().enumerate() {
        rows.push(row("target", t, String::new(), &|r| &r.per_target[ti]));
    }
    for (ti, t) in report.targets.iter().enumerate() {
        for s in 0..report.per_step[ti].len() {
            rows.push(row("step", t, (s + 1).to_string(), &|r| &r.per_step[ti][s]));
        }
    }
    (header, rows)
}

/// Test-split metrics of the median forecast, with the persistence baseline
/// side by side when `cfg.baseline` is set.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Evaluation> {
    let p = prepare(cfg)?;
    let run = run_test_split(&p, cfg.test_fraction, thread_count())?;
    let actual = run.batch.future_targets_raw.as_ref().expect("test batch carries targets");
    let targets = &p.model.schema.targets;
    let report = evaluate_forecasts(&run.forecasts, actual, targets)?;
    let baseline = if cfg.baseline {
        let b = persistence_baseline(&run.batch, &p.model.config.quantiles);
        Some(evaluate_forecasts(&b, actual, targets)?)
    } else {
        None
    };
    ensure_dir(&cfg.out)?;
    let (header, rows) = metric_rows(&report, baseline.as_ref());
    let path = cfg.out.join("metrics.csv");
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_rows(&path, &header, rows)?;
    let full = cfg.out.join("metrics.json");
    write_json(&full, &serde_json::json!({"model": report, "baseline": baseline}))?;
    write_manifest(
        cfg,
        "evaluate",
        &p.inputs,
        &[path, full],
        serde_json::json!({"windows": run.batch.len(), "mae": report.overall.mae}),
    )?;
    Ok(Evaluation { report, baseline })
}

#[cfg(test)]
mod tests {
    use super::*;
    use lfit_core::evaluation::compute_metrics;

    #[test]
    fn metric_rows_follow_report_and_baseline_flag() {
        let targets = vec!["y".to_string()];
        let r = compute_metrics(&[2.0, 2.0, 110.0, 3.0], &[1.0, 2.0, 100.0, 3.0], &targets, 2).unwrap();
        let (h, rows) = metric_rows(&r, None);
        assert_eq!(h.len(), 8);
        assert!(!h.iter().any(|c| c.starts_with("baseline_")));
        assert_eq!(rows.len(), 1 + 1 + 2);
        // step 1 pairs: (2, 1), (110, 100)
        assert_eq!(rows[2][..4], ["step", "y", "1", "2"]);
        assert_eq!(rows[2][4].parse::<f64>().unwrap(), 5.5);
        let (h, rows) = metric_rows(&r, Some(&r));
        assert_eq!(h.len(), 13);
        assert_eq!(rows[0][4], rows[0][9]);
    }

    #[test]
    fn window_ids_are_file_safe() {
        let (ds, _) = generate_synthetic(&SyntheticSpec {
            series_count: 1,
            length: 20,
            ..Default::default()
        })
        .unwrap();
        let mut ds = ds;
        ds.series[0].id = "a/b c".into();
        assert_eq!(window_id(&ds, &Window { series: 0, start: 2 }, 5), "a_b_c_7");
    }
}
