use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use log::{info, warn};

use super::{month_of_step, Series, SeriesDataset};
use crate::error::{LfitError, Result};

/// Series as parsed from a file: possibly gappy steps, `NaN` for missing cells.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub id: String,
    pub steps: Vec<i64>,
    pub months: Vec<u8>,
    pub values: Vec<Vec<f64>>,
    pub statics: Vec<Option<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    /// Series whose target missing-rate exceeds this are dropped.
    pub max_missing_rate: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            max_missing_rate: 0.7,
        }
    }
}

/// Audit trail of what ingestion changed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    /// `(series, target missing-rate)` of dropped series.
    pub dropped: Vec<(String, f64)>,
    /// `(series, channel, filled cells)`.
    pub filled: Vec<(String, String, usize)>,
    /// `(series, inserted steps)` for step gaps.
    pub inserted_steps: Vec<(String, usize)>,
}

/// Regularizes steps, applies the missing-rate rule and fills remaining gaps
/// (linear in the interior, nearest value at the edges).
#[allow(clippy::too_many_arguments)]
pub fn finalize_raw(
    targets: Vec<String>,
    observed: Vec<String>,
    known: Vec<String>,
    static_attrs: Vec<String>,
    cumulative: Vec<String>,
    calendar: bool,
    raw: Vec<RawSeries>,
    opts: &IngestOptions,
) -> Result<(SeriesDataset, IngestReport)> {
    let mut channels = targets.clone();
    channels.extend(observed.iter().cloned());
    channels.extend(known.iter().cloned());
    let n_targets = targets.len();
    let mut report = IngestReport::default();
    let mut series = Vec::new();

    for mut r in raw {
        if r.values.len() != channels.len() {
            return Err(LfitError::Data(format!(
                "series {} has {} channels, schema names {}",
                r.id,
                r.values.len(),
                channels.len()
            )));
        }
        let inserted = regularize_steps(&mut r)?;
        if inserted > 0 {
            report.inserted_steps.push((r.id.clone(), inserted));
        }
        let total = r.steps.len() * n_targets;
        let missing = r.values[..n_targets]
            .iter()
            .flat_map(|c| c.iter())
            .filter(|v| v.is_nan())
            .count();
        let rate = if total == 0 { 1.0 } else { missing as f64 / total as f64 };
        if rate > opts.max_missing_rate {
            warn!("dropping series {}: target missing rate {:.3}", r.id, rate);
            report.dropped.push((r.id, rate));
            continue;
        }
        for (c, col) in r.values.iter_mut().enumerate() {
            let n = fill_gaps(col).map_err(|_| {
                LfitError::Data(format!("series {} channel {} has no values", r.id, channels[c]))
            })?;
            if n > 0 {
                info!("series {}: filled {n} cells of {}", r.id, channels[c]);
                report.filled.push((r.id.clone(), channels[c].clone(), n));
            }
        }
        let mut statics = Vec::with_capacity(static_attrs.len());
        for (a, v) in static_attrs.iter().zip(&r.statics) {
            match v {
                Some(v) => statics.push(v.clone()),
                None => {
                    return Err(LfitError::Data(format!(
                        "series {} has no value for static attribute {a}",
                        r.id
                    )))
                }
            }
        }
        if r.statics.len() != static_attrs.len() {
            return Err(LfitError::Data(format!("series {} lacks static attributes", r.id)));
        }
        series.push(Series {
            id: r.id,
            steps: r.steps,
            months: r.months,
            values: r.values,
            statics,
        });
    }
    if series.is_empty() {
        return Err(LfitError::Data("no series left after ingestion".into()));
    }
    let ds = SeriesDataset {
        targets,
        observed,
        known,
        static_attrs,
        cumulative,
        calendar,
        series,
    };
    ds.validate()?;
    Ok((ds, report))
}

/// Sorts by step and inserts `NaN` rows for missing steps. Duplicate steps are an error.
fn regularize_steps(r: &mut RawSeries) -> Result<usize> {
    let mut order: Vec<usize> = (0..r.steps.len()).collect();
    order.sort_by_key(|&i| r.steps[i]);
    for w in order.windows(2) {
        if r.steps[w[0]] == r.steps[w[1]] {
            return Err(LfitError::Data(format!(
                "duplicate (series_id, timestamp) = ({}, step {})",
                r.id, r.steps[w[0]]
            )));
        }
    }
    let Some(&first) = order.first() else {
        return Ok(0);
    };
    let lo = r.steps[first];
    let hi = r.steps[*order.last().unwrap()];
    let len = (hi - lo + 1) as usize;
    let mut steps: Vec<i64> = (lo..=hi).collect();
    let mut months: Vec<u8> = steps.iter().map(|&s| month_of_step(s)).collect();
    let mut values = vec![vec![f64::NAN; len]; r.values.len()];
    for &i in &order {
        let pos = (r.steps[i] - lo) as usize;
        months[pos] = r.months[i];
        for (c, col) in r.values.iter().enumerate() {
            values[c][pos] = col[i];
        }
    }
    let inserted = len - r.steps.len();
    core::mem::swap(&mut r.steps, &mut steps);
    r.months = months;
    r.values = values;
    Ok(inserted)
}

/// Linear interpolation between known neighbours, nearest value at the edges.
/// Returns the number of filled cells, or `Err(())` if nothing is known.
pub(crate) fn fill_gaps(col: &mut [f64]) -> core::result::Result<usize, ()> {
    let known: Vec<usize> = (0..col.len()).filter(|&i| !col[i].is_nan()).collect();
    if known.is_empty() {
        return if col.is_empty() { Ok(0) } else { Err(()) };
    }
    let mut filled = 0;
    let (first, last) = (known[0], *known.last().unwrap());
    for i in 0..first {
        col[i] = col[first];
        filled += 1;
    }
    for i in last + 1..col.len() {
        col[i] = col[last];
        filled += 1;
    }
    for w in known.windows(2) {
        let (a, b) = (w[0], w[1]);
        for i in a + 1..b {
            let t = (i - a) as f64 / (b - a) as f64;
            col[i] = col[a] + t * (col[b] - col[a]);
            filled += 1;
        }
    }
    Ok(filled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn raw(id: &str, steps: Vec<i64>, target: Vec<f64>) -> RawSeries {
        RawSeries {
            id: id.to_string(),
            months: steps.iter().map(|&s| month_of_step(s)).collect(),
            steps,
            values: vec![target],
            statics: vec![],
        }
    }

    fn finalize(r: Vec<RawSeries>) -> Result<(SeriesDataset, IngestReport)> {
        finalize_raw(
            vec!["y".into()],
            vec![],
            vec![],
            vec![],
            vec![],
            true,
            r,
            &IngestOptions::default(),
        )
    }

    #[test]
    fn interior_gap_is_linear() {
        let mut c = [1.0, f64::NAN, 3.0];
        assert_eq!(fill_gaps(&mut c), Ok(1));
        assert_eq!(c, [1.0, 2.0, 3.0]);
        let mut e = [f64::NAN, 4.0, f64::NAN, f64::NAN];
        fill_gaps(&mut e).unwrap();
        assert_eq!(e, [4.0; 4]);
    }

    #[test]
    fn mostly_missing_series_dropped() {
        let nan = f64::NAN;
        let sparse = raw("a", (0..10).collect(), vec![1.0, 2.0, nan, nan, nan, nan, nan, nan, nan, nan]);
        let fine = raw("b", (0..3).collect(), vec![1.0, 2.0, 3.0]);
        let (ds, rep) = finalize(vec![sparse, fine]).unwrap();
        assert_eq!(ds.series.len(), 1);
        assert_eq!(rep.dropped.len(), 1);
        assert_eq!(rep.dropped[0].0, "a");
        assert!((rep.dropped[0].1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn missing_steps_inserted_and_filled() {
        let (ds, rep) = finalize(vec![raw("a", vec![0, 2, 1, 4], vec![0.0, 2.0, 1.0, 4.0])]).unwrap();
        assert_eq!(ds.series[0].steps, vec![0, 1, 2, 3, 4]);
        assert_eq!(ds.series[0].values[0], vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(rep.inserted_steps, vec![("a".to_string(), 1)]);
    }

    #[test]
    fn duplicate_key_rejected() {
        let err = finalize(vec![raw("a", vec![0, 1, 1], vec![0.0, 1.0, 2.0])]).unwrap_err();
        assert!(matches!(err, LfitError::Data(m) if m.contains("duplicate")));
    }

    #[test]
    fn all_dropped_is_error() {
        let nan = f64::NAN;
        assert!(finalize(vec![raw("a", vec![0, 1], vec![nan, nan])]).is_err());
    }
}
