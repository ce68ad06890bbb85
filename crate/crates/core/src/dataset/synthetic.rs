use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{month_of_step, Series, SeriesDataset};
use crate::error::{LfitError, Result};
use crate::math;
use crate::rng_from_seed;

pub const SYNTHETIC_TARGET: &str = "displacement";
pub const WATER_LEVEL: &str = "water_level";
pub const RAINFALL: &str = "rainfall";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseMode {
    /// Displacement steps follow reservoir drawdown.
    WaterDriven,
    /// Displacement steps follow rainfall spikes.
    RainfallDriven,
    /// Pure random walk.
    Noise,
}

impl ResponseMode {
    fn driver(self) -> &'static str {
        match self {
            Self::WaterDriven => WATER_LEVEL,
            Self::RainfallDriven => RAINFALL,
            Self::Noise => "none",
        }
    }

    fn danger(self) -> &'static str {
        match self {
            Self::WaterDriven => "danger",
            Self::RainfallDriven => "near-danger",
            Self::Noise => "non-danger",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub series_count: usize,
    pub length: usize,
    pub period: usize,
    pub amplitude: f64,
    /// Probability of a rainfall spike at any step.
    pub rain_rate: f64,
    pub rain_magnitude: f64,
    /// Response mode per series, cycled when shorter than `series_count`.
    pub modes: Vec<ResponseMode>,
    pub gain: f64,
    pub lag: usize,
    pub trend: f64,
    pub noise_std: f64,
    /// Number of pure-noise observed covariates.
    pub noise_covariates: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            series_count: 6,
            length: 240,
            period: 12,
            amplitude: 10.0,
            rain_rate: 0.15,
            rain_magnitude: 50.0,
            modes: vec![
                ResponseMode::WaterDriven,
                ResponseMode::RainfallDriven,
                ResponseMode::Noise,
            ],
            gain: 0.5,
            lag: 1,
            trend: 0.05,
            noise_std: 0.2,
            noise_covariates: 2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.period < 2 {
            return Err(LfitError::Config("synthetic period must be >= 2".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(LfitError::Config("synthetic noise stdev must be >= 0".into()));
        }
        if self.series_count == 0 || self.length < 2 {
            return Err(LfitError::Config("synthetic spec needs series and length >= 2".into()));
        }
        if self.modes.is_empty() {
            return Err(LfitError::Config("synthetic spec needs at least one response mode".into()));
        }
        if !(0.0..=1.0).contains(&self.rain_rate) {
            return Err(LfitError::Config("rain rate must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn mode_of(&self, series: usize) -> ResponseMode {
        self.modes[series % self.modes.len()]
    }

    /// Water level `A·sin(2πt/period)`.
    pub fn water_level(&self, t: usize) -> f64 {
        self.amplitude * math::sin(2.0 * core::f64::consts::PI * t as f64 / self.period as f64)
    }

    /// Drawdown `max(0, w(t−1) − w(t))`, zero at `t = 0`.
    pub fn drawdown(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            (self.water_level(t - 1) - self.water_level(t)).max(0.0)
        }
    }

    pub fn noise_names(&self) -> Vec<String> {
        (1..=self.noise_covariates).map(|i| format!("noise_{i}")).collect()
    }
}

/// True driver of one synthetic series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub series_id: String,
    pub mode: ResponseMode,
    pub driver: String,
    pub lag: usize,
}

/// Shared reservoir level and rainfall, per-series displacement responses,
/// noise covariates and danger/soil statics.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(SeriesDataset, Vec<GroundTruth>)> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let n = spec.length;
    let water: Vec<f64> = (0..n).map(|t| spec.water_level(t)).collect();
    let rain: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < spec.rain_rate {
                spec.rain_magnitude * (0.5 + rng.random::<f64>())
            } else {
                0.0
            }
        })
        .collect();
    let soils = ["clay", "gravel", "silt"];

    let mut series = Vec::with_capacity(spec.series_count);
    let mut truth = Vec::with_capacity(spec.series_count);
    for i in 0..spec.series_count {
        let mode = spec.mode_of(i);
        let id = format!("P{:02}", i + 1);
        let mut disp = vec![0.0; n];
        for t in 1..n {
            let eps: f64 = rng.sample(StandardNormal);
            let lagged = t.checked_sub(spec.lag);
            let inc = match mode {
                ResponseMode::WaterDriven => {
                    spec.gain * lagged.map_or(0.0, |s| spec.drawdown(s)) + spec.trend
                }
                ResponseMode::RainfallDriven => {
                    spec.gain * lagged.map_or(0.0, |s| rain[s]) + spec.trend
                }
                ResponseMode::Noise => 0.0,
            };
            disp[t] = disp[t - 1] + inc + spec.noise_std * eps;
        }
        let mut values = vec![disp, water.clone(), rain.clone()];
        for _ in 0..spec.noise_covariates {
            values.push((0..n).map(|_| rng.sample(StandardNormal)).collect());
        }
        series.push(Series {
            steps: (0..n as i64).collect(),
            months: (0..n as i64).map(month_of_step).collect(),
            values,
            statics: vec![mode.danger().into(), soils[i % soils.len()].into()],
            id: id.clone(),
        });
        truth.push(GroundTruth {
            series_id: id,
            mode,
            driver: mode.driver().into(),
            lag: spec.lag,
        });
    }
    let mut observed = vec![String::from(WATER_LEVEL), String::from(RAINFALL)];
    observed.extend(spec.noise_names());
    let ds = SeriesDataset {
        targets: vec![SYNTHETIC_TARGET.into()],
        observed,
        known: vec![],
        static_attrs: vec!["danger".into(), "soil".into()],
        cumulative: vec![],
        calendar: true,
        series,
    };
    ds.validate()?;
    Ok((ds, truth))
}
