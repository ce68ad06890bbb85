use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lfit::commands::{cmd_train, forecast_rows, prepare, Prepared};
use lfit::RunConfig;
use serde_json::{json, Value};

const SERIES: usize = 3;
const LENGTH: usize = 60;
const HORIZON: usize = 4;
const ENCODER: usize = 12;
const QUANTILES: usize = 7;

fn base_config() -> Value {
    json!({
        "synthetic": {"series_count": SERIES, "length": LENGTH},
        "model": {"d_model": 8, "head_count": 2, "encoder_length": ENCODER, "horizon": HORIZON},
        "train": {"max_epochs": 3, "batch_size": 32, "early_stop_patience": 3, "learning_rate": 0.003},
        "seed": 5
    })
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn lfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfit"))
        .args(args)
        .env("LFIT_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_csv(p: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(p).unwrap();
    let h = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (h, rows)
}

/// Trains once into `dir/run` and returns the config path.
fn trained(dir: &Path) -> PathBuf {
    let cfg = write_config(dir, "run.json", &base_config());
    ok(&lfit(&["train", "--config", s(&cfg), "--out", s(&dir.join("run"))]));
    cfg
}

#[test]
fn generate_is_byte_identical_and_lists_drivers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "gen.json", &base_config());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&lfit(&["generate", "--config", s(&cfg), "--out", s(&a)]));
    ok(&lfit(&["generate", "--config", s(&cfg), "--out", s(&b)]));
    assert_eq!(fs::read(a.join("data.csv")).unwrap(), fs::read(b.join("data.csv")).unwrap());
    assert_eq!(fs::read(a.join("statics.csv")).unwrap(), fs::read(b.join("statics.csv")).unwrap());
    let (header, rows) = read_csv(&a.join("data.csv"));
    assert_eq!(rows.len(), SERIES * LENGTH);
    assert_eq!(header[..3], ["series_id", "timestamp", "displacement"]);
    let truth: Value = serde_json::from_str(&fs::read_to_string(a.join("ground_truth.json")).unwrap()).unwrap();
    let series = truth["series"].as_array().unwrap();
    assert_eq!(series.len(), SERIES);
    assert_eq!(series[0]["driver"], "water_level");
    assert!(a.join("manifest-generate.json").exists());

    ok(&lfit(&["generate", "--config", s(&cfg), "--out", s(&b), "--seed", "6"]));
    assert_ne!(fs::read(a.join("data.csv")).unwrap(), fs::read(b.join("data.csv")).unwrap());
}

#[test]
fn train_is_reproducible_from_config_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &base_config());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&lfit(&["train", "--config", s(&cfg), "--out", s(&a)]));
    ok(&lfit(&["train", "--config", s(&cfg), "--out", s(&b)]));
    let model = fs::read(a.join("model.lfit")).unwrap();
    assert_eq!(model, fs::read(b.join("model.lfit")).unwrap());

    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest-train.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config"]["train"]["seed"], 5);
    assert_eq!(manifest["config"]["model"]["d_model"], 8);
    assert_eq!(manifest["outputs"][0]["path"], "model.lfit");
    ok(&lfit(&["train", "--config", s(&a.join("manifest-train.json")), "--out", s(&c)]));
    assert_eq!(model, fs::read(c.join("model.lfit")).unwrap());

    let (h, rows) = read_csv(&a.join("training_log.csv"));
    assert_eq!(h, ["epoch", "train_objective", "val_objective", "elapsed_seconds"]);
    assert!(rows.len() >= 2);
}

#[test]
fn usage_and_runtime_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &base_config());
    let out = lfit(&["train", "--config", s(&cfg), "--scenario", "NOT-A-SCENARIO"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown scenario"));
    assert_eq!(lfit(&["train"]).status.code(), Some(2));
    assert_eq!(lfit(&["bogus"]).status.code(), Some(2));

    let mut v = base_config();
    v["synthetic"] = Value::Null;
    v["data"] = json!({"csv": "missing.csv", "schema": "missing.json"});
    let missing = write_config(dir.path(), "missing.json.cfg", &v);
    let out = lfit(&["train", "--config", s(&missing), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn forecast_rows_match_in_memory_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "run.json", &base_config());
    let run = dir.path().join("run");
    let cfg = RunConfig::read(&cfg_path).unwrap().with_overrides(&lfit::Overrides {
        out: Some(run.clone()),
        ..Default::default()
    });
    let trained = cmd_train(&cfg).unwrap();
    ok(&lfit(&["forecast", "--config", s(&cfg_path), "--out", s(&run)]));
    let (h, rows) = read_csv(&run.join("forecasts.csv"));
    assert_eq!(h, ["series_id", "target", "step", "time_index", "quantile", "value"]);
    assert_eq!(rows.len(), SERIES * HORIZON * QUANTILES);
    assert_eq!(rows[0][3], LENGTH.to_string());

    let loaded = prepare(&cfg).unwrap();
    let in_memory = Prepared {
        model: trained.model,
        ..loaded
    };
    let expected = forecast_rows(&in_memory, None, 1).unwrap();
    for (r, e) in rows.iter().zip(&expected) {
        assert_eq!(r[0], e.series_id);
        assert_eq!(r[4].parse::<f64>().unwrap(), e.quantile);
        assert_eq!(r[5].parse::<f64>().unwrap(), e.value);
    }

    ok(&lfit(&["forecast", "--config", s(&cfg_path), "--out", s(&run), "--horizon", "2"]));
    assert_eq!(read_csv(&run.join("forecasts.csv")).1.len(), SERIES * 2 * QUANTILES);
    let out = lfit(&["forecast", "--config", s(&cfg_path), "--out", s(&run), "--horizon", "9"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn forecast_reports_schema_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let mut v = base_config();
    v["synthetic"]["noise_covariates"] = json!(1);
    v["model_path"] = json!(dir.path().join("run/model.lfit"));
    let other = write_config(dir.path(), "other.json", &v);
    let out = lfit(&["forecast", "--config", s(&other), "--out", s(&dir.path().join("f"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("does not match model schema") && err.contains("noise_2"), "{err}");
    assert!(cfg.exists());
}

#[test]
fn explain_writes_normalized_importance_and_square_attention() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let run = dir.path().join("run");
    ok(&lfit(&["explain", "--config", s(&cfg), "--out", s(&run)]));
    let (h, rows) = read_csv(&run.join("importance.csv"));
    assert_eq!(h, ["group", "channel", "mean", "std"]);
    for g in ["past", "future", "static"] {
        let total: f64 = rows.iter().filter(|r| r[0] == g).map(|r| r[2].parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9, "{g}: {total}");
    }
    let files: Vec<PathBuf> = fs::read_dir(run.join("attention")).unwrap().map(|e| e.unwrap().path()).collect();
    // trailing round(0.2·60) = 12 steps hold 12 − 4 + 1 = 9 windows per series
    assert_eq!(files.len(), SERIES * 9);
    let t = ENCODER + HORIZON;
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(&files[0]).unwrap();
    let m: Vec<Vec<f64>> = r
        .records()
        .map(|x| x.unwrap().iter().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(m.len(), t);
    assert!(m.iter().all(|row| row.len() == t));

    let first = fs::read(run.join("importance.csv")).unwrap();
    let attn = fs::read(&files[0]).unwrap();
    ok(&lfit(&["explain", "--config", s(&cfg), "--out", s(&run)]));
    assert_eq!(fs::read(run.join("importance.csv")).unwrap(), first);
    assert_eq!(fs::read(&files[0]).unwrap(), attn);
}

#[test]
fn evaluate_baseline_columns_only_with_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let run = dir.path().join("run");
    ok(&lfit(&["evaluate", "--config", s(&cfg), "--out", s(&run)]));
    let (h, rows) = read_csv(&run.join("metrics.csv"));
    assert!(!h.iter().any(|c| c.starts_with("baseline_")));
    assert_eq!(rows[0][0], "overall");
    assert_eq!(rows.len(), 1 + 1 + HORIZON);
    ok(&lfit(&["evaluate", "--config", s(&cfg), "--out", s(&run), "--baseline"]));
    let (h, rows) = read_csv(&run.join("metrics.csv"));
    for m in ["mae", "mape", "rmse", "smape"] {
        assert!(h.contains(&format!("baseline_{m}")), "{h:?}");
    }
    let col = |name: &str| h.iter().position(|c| c == name).unwrap();
    for r in &rows {
        let (mae, rmse) = (r[col("mae")].parse::<f64>().unwrap(), r[col("rmse")].parse::<f64>().unwrap());
        assert!(rmse >= mae);
    }
}

#[test]
fn empty_test_split_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let mut v = base_config();
    v["test_fraction"] = json!(0.01);
    v["model_path"] = json!(dir.path().join("run/model.lfit"));
    let cfg = write_config(dir.path(), "tiny.json", &v);
    let out = lfit(&["evaluate", "--config", s(&cfg), "--out", s(&dir.path().join("e"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty test split"));
}

#[test]
fn csv_source_trains_the_same_model_as_the_generator() {
    let dir = tempfile::tempdir().unwrap();
    let gen_cfg = write_config(dir.path(), "gen.json", &base_config());
    let data = dir.path().join("data");
    ok(&lfit(&["generate", "--config", s(&gen_cfg), "--out", s(&data)]));
    ok(&lfit(&["train", "--config", s(&gen_cfg), "--out", s(&dir.path().join("a"))]));

    let mut v = base_config();
    v["synthetic"] = Value::Null;
    v["data"] = json!({"csv": "data/data.csv", "schema": "data/schema.json", "statics": "data/statics.csv"});
    let csv_cfg = write_config(dir.path(), "csv.json", &v);
    ok(&lfit(&["train", "--config", s(&csv_cfg), "--out", s(&dir.path().join("b"))]));
    assert_eq!(
        fs::read(dir.path().join("a/model.lfit")).unwrap(),
        fs::read(dir.path().join("b/model.lfit")).unwrap()
    );
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("b/manifest-train.json")).unwrap()).unwrap();
    let inputs = manifest["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 3);
    assert_eq!(inputs[0]["sha256"].as_str().unwrap().len(), 64);
}
