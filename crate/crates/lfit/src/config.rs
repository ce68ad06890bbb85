use std::fs;
use std::path::{Path, PathBuf};

use lfit_core::dataset::SyntheticSpec;
use lfit_core::model::LfitConfig;
use lfit_core::scenario::{Scenario, ScenarioSpec};
use lfit_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Data file, its schema and an optional statics sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub csv: PathBuf,
    pub schema: PathBuf,
    #[serde(default)]
    pub statics: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<DataSource>,
    pub synthetic: Option<SyntheticSpec>,
    pub scenario: String,
    pub target_series: Option<String>,
    pub target_channel: Option<String>,
    pub model: LfitConfig,
    pub train: TrainConfig,
    /// Trailing share of every series held out for evaluation.
    pub test_fraction: f64,
    pub max_missing_rate: f64,
    /// Model file read by forecast, explain and evaluate.
    pub model_path: Option<PathBuf>,
    /// Forecast steps to emit, at most the model horizon.
    pub forecast_horizon: Option<usize>,
    pub baseline: bool,
    pub out: PathBuf,
    /// Overrides both the training and the synthetic seed.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            synthetic: None,
            scenario: Scenario::MtMpcPkEv.name().into(),
            target_series: None,
            target_channel: None,
            model: LfitConfig::default(),
            train: TrainConfig::default(),
            test_fraction: 0.2,
            max_missing_rate: 0.7,
            model_path: None,
            forecast_horizon: None,
            baseline: false,
            out: PathBuf::from("lfit-run"),
            seed: None,
        }
    }
}

/// Command-line values that win over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub scenario: Option<String>,
    pub baseline: bool,
    pub model: Option<PathBuf>,
    pub horizon: Option<usize>,
}

impl RunConfig {
    /// Reads a config file, or the effective config stored in a manifest.
    /// Relative paths are resolved against the file's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if value.get("command").is_some() {
            if let Some(inner) = value.get_mut("config") {
                value = inner.take();
            }
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = &mut self.data {
            fix(&mut d.csv);
            fix(&mut d.schema);
            if let Some(s) = &mut d.statics {
                fix(s);
            }
        }
        if let Some(m) = &mut self.model_path {
            fix(m);
        }
        fix(&mut self.out);
    }

    /// Applies flag overrides and propagates the seed; the result is the
    /// effective config echoed into manifests.
    pub fn with_overrides(mut self, o: &Overrides) -> Self {
        if let Some(s) = o.seed {
            self.seed = Some(s);
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(s) = &o.scenario {
            self.scenario = s.clone();
        }
        self.baseline |= o.baseline;
        if let Some(m) = &o.model {
            self.model_path = Some(m.clone());
        }
        if let Some(h) = o.horizon {
            self.forecast_horizon = Some(h);
        }
        if let Some(s) = self.seed {
            self.train.seed = s;
            if let Some(spec) = &mut self.synthetic {
                spec.seed = s;
            }
        }
        self
    }

    pub fn scenario_spec(&self) -> Result<ScenarioSpec> {
        let scenario: Scenario = self.scenario.parse().map_err(|e: lfit_core::LfitError| {
            CliError::Usage(e.to_string().trim_start_matches("configuration error: ").into())
        })?;
        Ok(ScenarioSpec {
            scenario,
            target_series: self.target_series.clone(),
            target_channel: self.target_channel.clone(),
        })
    }

    /// Exactly one of `data` and `synthetic` must be set.
    pub fn check_source(&self) -> Result<()> {
        match (&self.data, &self.synthetic) {
            (Some(_), Some(_)) => Err(CliError::Usage("config sets both data and synthetic".into())),
            (None, None) => Err(CliError::Usage("config needs a data or a synthetic section".into())),
            _ => Ok(()),
        }
    }

    pub fn check(&self) -> Result<()> {
        self.check_source()?;
        self.scenario_spec()?;
        self.model.validate()?;
        self.train.validate()?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(CliError::Usage("test_fraction must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.max_missing_rate) {
            return Err(CliError::Usage("max_missing_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn model_file(&self) -> PathBuf {
        self.model_path.clone().unwrap_or_else(|| self.out.join(crate::MODEL_FILE))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_and_seed_propagates() {
        let cfg = RunConfig {
            synthetic: Some(SyntheticSpec::default()),
            seed: Some(1),
            ..Default::default()
        };
        let o = Overrides {
            seed: Some(9),
            scenario: Some("MT-MPC".into()),
            baseline: true,
            ..Default::default()
        };
        let eff = cfg.with_overrides(&o);
        assert_eq!(eff.seed, Some(9));
        assert_eq!(eff.train.seed, 9);
        assert_eq!(eff.synthetic.as_ref().unwrap().seed, 9);
        assert_eq!(eff.scenario_spec().unwrap().scenario, Scenario::MtMpc);
        assert!(eff.baseline);
    }

    #[test]
    fn bad_scenario_and_sources_are_usage_errors() {
        let cfg = RunConfig {
            scenario: "ST-XYZ".into(),
            synthetic: Some(SyntheticSpec::default()),
            ..Default::default()
        };
        assert_eq!(cfg.check().unwrap_err().exit_code(), 2);
        assert_eq!(RunConfig::default().check().unwrap_err().exit_code(), 2);
        let both = RunConfig {
            synthetic: Some(SyntheticSpec::default()),
            data: Some(DataSource {
                csv: "a".into(),
                schema: "b".into(),
                statics: None,
            }),
            ..Default::default()
        };
        assert_eq!(both.check().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn relative_paths_follow_config_file_and_manifests_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        fs::write(
            &p,
            r#"{"data": {"csv": "d.csv", "schema": "s.json"}, "out": "out", "model": {"d_model": 8, "head_count": 2}}"#,
        )
        .unwrap();
        let cfg = RunConfig::read(&p).unwrap();
        assert_eq!(cfg.data.as_ref().unwrap().csv, dir.path().join("d.csv"));
        assert_eq!(cfg.out, dir.path().join("out"));
        assert_eq!(cfg.model.d_model, 8);
        assert_eq!(cfg.model.horizon, LfitConfig::default().horizon);

        let m = dir.path().join("manifest.json");
        let manifest = serde_json::json!({"command": "train", "config": cfg});
        fs::write(&m, manifest.to_string()).unwrap();
        assert_eq!(RunConfig::read(&m).unwrap(), cfg);
        fs::write(&p, r#"{"unknown_key": 1}"#).unwrap();
        assert_eq!(RunConfig::read(&p).unwrap_err().exit_code(), 2);
    }
}
