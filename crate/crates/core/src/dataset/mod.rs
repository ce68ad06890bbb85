//! Multi-site monitoring series, their channel roles, and everything needed to
//! turn them into encoder/decoder windows.

mod ingest;
mod statics;
mod synthetic;
mod windows;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{LfitError, Result};

pub use ingest::{finalize_raw, IngestOptions, IngestReport, RawSeries};
pub use statics::{encode_statics, index_statics, Vocabulary};
pub use synthetic::{
    generate_synthetic, GroundTruth, ResponseMode, SyntheticSpec, RAINFALL, SYNTHETIC_TARGET,
    WATER_LEVEL,
};
pub use windows::{
    build_windows, chronological_windows, extend_for_forecast, series_split_point, ChannelSchema, Window,
    WindowBatch,
};

/// Name of the derived continuous time-index channel.
pub const TIME_INDEX: &str = "time_idx";
/// Derived categorical calendar channels and their cardinalities.
pub const CALENDAR_CHANNELS: [(&str, usize); 2] = [("month", 12), ("season", 4)];
/// Static attribute holding the monitoring-point label (the series id).
pub const POINT_LABEL: &str = "monitoring_point";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelRole {
    Target,
    Observed,
    KnownFuture,
    Static,
}

/// One monitoring series after ingestion: contiguous steps, no missing values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub id: String,
    /// Contiguous integer step index.
    pub steps: Vec<i64>,
    /// Calendar month (1–12) of each step.
    pub months: Vec<u8>,
    /// One column per continuous channel, in [`SeriesDataset::continuous_channels`] order.
    pub values: Vec<Vec<f64>>,
    /// One value per static attribute, in [`SeriesDataset::static_attrs`] order.
    pub statics: Vec<String>,
}

impl Series {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesDataset {
    pub targets: Vec<String>,
    pub observed: Vec<String>,
    /// User-supplied continuous known-future channels.
    pub known: Vec<String>,
    pub static_attrs: Vec<String>,
    /// Observed channels holding cumulative quantities (handled like targets
    /// when windows are standardized).
    pub cumulative: Vec<String>,
    /// Derive month/season/time-index known-future channels.
    pub calendar: bool,
    pub series: Vec<Series>,
}

impl SeriesDataset {
    /// Targets, then observed, then user known-future channels.
    pub fn continuous_channels(&self) -> Vec<String> {
        let mut v = self.targets.clone();
        v.extend(self.observed.iter().cloned());
        v.extend(self.known.iter().cloned());
        v
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.continuous_channels().iter().position(|c| c == name)
    }

    pub fn series_by_id(&self, id: &str) -> Option<&Series> {
        self.series.iter().find(|s| s.id == id)
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        if self.series.is_empty() {
            return Err(LfitError::Data("dataset has no series".into()));
        }
        if self.targets.is_empty() {
            return Err(LfitError::Data("dataset has no target channel".into()));
        }
        let n = self.continuous_channels().len();
        for s in &self.series {
            if s.values.len() != n {
                return Err(LfitError::Data(format!(
                    "series {} has {} channels, expected {n}",
                    s.id,
                    s.values.len()
                )));
            }
            if s.statics.len() != self.static_attrs.len() {
                return Err(LfitError::Data(format!(
                    "series {} lacks static attributes",
                    s.id
                )));
            }
            if s.months.len() != s.len() || s.values.iter().any(|c| c.len() != s.len()) {
                return Err(LfitError::Data(format!("series {} is ragged", s.id)));
            }
            if s.steps.windows(2).any(|w| w[1] != w[0] + 1) {
                return Err(LfitError::Data(format!("series {} has non-contiguous steps", s.id)));
            }
            for (c, col) in s.values.iter().enumerate() {
                if let Some(t) = col.iter().position(|v| !v.is_finite()) {
                    return Err(LfitError::Data(format!(
                        "series {} channel {} has a non-finite value at step {}",
                        s.id,
                        self.continuous_channels()[c],
                        s.steps[t]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Keeps only the first `len_of(series_len)` steps of every series.
    pub fn truncated(&self, len_of: impl Fn(usize) -> usize) -> SeriesDataset {
        let mut out = self.clone();
        for s in &mut out.series {
            let n = len_of(s.len()).min(s.len());
            s.steps.truncate(n);
            s.months.truncate(n);
            for c in &mut s.values {
                c.truncate(n);
            }
        }
        out
    }
}

/// Month (1–12) to season index (0–3): DJF, MAM, JJA, SON.
pub fn season_of(month: u8) -> usize {
    ((month as usize) % 12) / 3
}

/// Month for an integer step index under a monthly-resolution assumption.
pub fn month_of_step(step: i64) -> u8 {
    (step.rem_euclid(12) + 1) as u8
}

/// Element-wise Euclidean norm of aligned per-direction component series.
pub fn integrate_displacement(components: &[&[f64]]) -> Result<Vec<f64>> {
    let Some(first) = components.first() else {
        return Err(LfitError::Contract("no displacement components".into()));
    };
    let n = first.len();
    if let Some(bad) = components.iter().find(|c| c.len() != n) {
        return Err(LfitError::Contract(format!(
            "misaligned displacement components: {n} vs {}",
            bad.len()
        )));
    }
    Ok((0..n)
        .map(|t| {
            let ss: f64 = components.iter().map(|c| c[t] * c[t]).sum();
            crate::math::sqrt(ss)
        })
        .collect())
}
