use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use log::info;
use serde::{Deserialize, Serialize};

use super::{season_of, SeriesDataset, Vocabulary, CALENDAR_CHANNELS, TIME_INDEX};
use crate::error::{LfitError, Result};
use crate::training::Standardizer;

/// Channel arrangement the network is built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSchema {
    pub targets: Vec<String>,
    pub observed: Vec<String>,
    /// User known-future channels followed by the derived time index.
    pub known_continuous: Vec<String>,
    pub known_categorical: Vec<(String, usize)>,
    pub statics: Vec<(String, usize)>,
}

impl ChannelSchema {
    pub fn from_dataset(ds: &SeriesDataset, vocabs: &[Vocabulary]) -> Self {
        let mut known_continuous = ds.known.clone();
        let mut known_categorical = Vec::new();
        if ds.calendar {
            known_continuous.push(TIME_INDEX.into());
            known_categorical = CALENDAR_CHANNELS
                .iter()
                .map(|(n, c)| (String::from(*n), *c))
                .collect();
        }
        Self {
            targets: ds.targets.clone(),
            observed: ds.observed.clone(),
            known_continuous,
            known_categorical,
            statics: vocabs.iter().map(|v| (v.attribute.clone(), v.len())).collect(),
        }
    }

    /// Continuous channels seen by the encoder: targets, observed, known.
    pub fn past_continuous(&self) -> Vec<String> {
        let mut v = self.targets.clone();
        v.extend(self.observed.iter().cloned());
        v.extend(self.known_continuous.iter().cloned());
        v
    }

    pub fn n_past(&self) -> usize {
        self.targets.len() + self.observed.len() + self.known_continuous.len() + self.known_categorical.len()
    }

    pub fn n_future(&self) -> usize {
        self.known_continuous.len() + self.known_categorical.len()
    }

    /// Names of past selector inputs in order.
    pub fn past_names(&self) -> Vec<String> {
        let mut v = self.past_continuous();
        v.extend(self.known_categorical.iter().map(|(n, _)| n.clone()));
        v
    }

    /// Names of future selector inputs in order.
    pub fn future_names(&self) -> Vec<String> {
        let mut v = self.known_continuous.clone();
        v.extend(self.known_categorical.iter().map(|(n, _)| n.clone()));
        v
    }

    pub fn static_names(&self) -> Vec<String> {
        self.statics.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Verifies that a dataset provides exactly this schema.
    pub fn check_dataset(&self, ds: &SeriesDataset) -> Result<()> {
        let mut known = ds.known.clone();
        if ds.calendar {
            known.push(TIME_INDEX.into());
        }
        let static_names = self.static_names();
        let ok = ds.targets == self.targets
            && ds.observed == self.observed
            && known == self.known_continuous
            && ds.calendar == !self.known_categorical.is_empty()
            && ds.static_attrs == static_names;
        if ok {
            Ok(())
        } else {
            Err(LfitError::Contract(format!(
                "dataset schema (targets {:?}, observed {:?}, known {:?}, statics {:?}) does not match model schema (targets {:?}, observed {:?}, known {:?}, statics {:?})",
                ds.targets, ds.observed, known, ds.static_attrs,
                self.targets, self.observed, self.known_continuous, static_names
            )))
        }
    }
}

/// One encoder/decoder window: encoder covers `[start, start+k)` of series
/// `series`, the horizon `[start+k, start+k+τ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub series: usize,
    pub start: usize,
}

impl Window {
    pub fn forecast_start(&self, k: usize) -> usize {
        self.start + k
    }
}

/// Sliding windows over every series long enough for `k + τ` steps.
pub fn build_windows(ds: &SeriesDataset, k: usize, tau: usize, stride: usize) -> Result<Vec<Window>> {
    if k == 0 || tau == 0 || stride == 0 {
        return Err(LfitError::Contract("k, horizon and stride must be >= 1".into()));
    }
    let mut out = Vec::new();
    for (i, s) in ds.series.iter().enumerate() {
        if s.len() < k + tau {
            info!("series {} too short for windows ({} < {})", s.id, s.len(), k + tau);
            continue;
        }
        let mut start = 0;
        while start + k + tau <= s.len() {
            out.push(Window { series: i, start });
            start += stride;
        }
    }
    if out.is_empty() {
        return Err(LfitError::Data(format!(
            "every series is shorter than encoder length + horizon ({})",
            k + tau
        )));
    }
    Ok(out)
}

/// Windows whose whole horizon lies in `[lo, hi)`, with `(lo, hi) = range(series_len)`.
pub fn chronological_windows(
    ds: &SeriesDataset,
    k: usize,
    tau: usize,
    stride: usize,
    range: impl Fn(usize) -> (usize, usize),
) -> Vec<Window> {
    let mut out = Vec::new();
    for (i, s) in ds.series.iter().enumerate() {
        let (lo, hi) = range(s.len());
        let hi = hi.min(s.len());
        let first_f = lo.max(k);
        let mut f = first_f;
        while f + tau <= hi {
            out.push(Window { series: i, start: f - k });
            f += stride.max(1);
        }
    }
    out
}

/// First index of the trailing `frac` portion of a series of length `len`.
pub fn series_split_point(len: usize, frac: f64) -> usize {
    let tail = libm::round(len as f64 * frac) as usize;
    len.saturating_sub(tail)
}

/// Standardized tensors for a set of windows, stored channel-major so each
/// channel embeds as one `[B·steps]` column.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub encoder_len: usize,
    pub horizon: usize,
    pub windows: Vec<Window>,
    /// Per past continuous channel (targets, observed, known), `[B·k]`.
    pub past_continuous: Vec<Vec<f64>>,
    /// Per known categorical channel, `[B·k]`.
    pub past_categorical: Vec<Vec<usize>>,
    /// Per known continuous channel, `[B·τ]`.
    pub future_continuous: Vec<Vec<f64>>,
    /// Per known categorical channel, `[B·τ]`.
    pub future_categorical: Vec<Vec<usize>>,
    /// Per static attribute, `[B]`.
    pub statics: Vec<Vec<usize>>,
    /// Standardized future targets `[B, targets, τ]`.
    pub future_targets: Option<Vec<f64>>,
    /// Raw future targets `[B, targets, τ]`.
    pub future_targets_raw: Option<Vec<f64>>,
    /// `raw = offset[b, m] + scale[m] · standardized`.
    pub target_offset: Vec<f64>,
    pub target_scale: Vec<f64>,
}

impl WindowBatch {
    /// Standardizes the given windows. `static_index[s]` holds the static
    /// indices of series `s`. Future targets are attached when
    /// `with_targets` is set and are never written into any input block.
    pub fn assemble(
        ds: &SeriesDataset,
        windows: &[Window],
        schema: &ChannelSchema,
        static_index: &[Vec<usize>],
        standardizer: &Standardizer,
        k: usize,
        tau: usize,
        with_targets: bool,
    ) -> Result<Self> {
        schema.check_dataset(ds)?;
        let b = windows.len();
        let n_ds = ds.continuous_channels().len();
        let m = ds.targets.len();
        let n_obs = ds.observed.len();
        let n_known_user = ds.known.len();
        let n_known = schema.known_continuous.len();
        if standardizer.channels.len() != n_ds + usize::from(ds.calendar) {
            return Err(LfitError::Contract("standardizer does not match dataset channels".into()));
        }

        let n_past_cont = m + n_obs + n_known;
        let mut past_continuous = vec![Vec::with_capacity(b * k); n_past_cont];
        let mut future_continuous = vec![Vec::with_capacity(b * tau); n_known];
        let n_cat = schema.known_categorical.len();
        let mut past_categorical = vec![Vec::with_capacity(b * k); n_cat];
        let mut future_categorical = vec![Vec::with_capacity(b * tau); n_cat];
        let mut statics = vec![Vec::with_capacity(b); schema.statics.len()];
        let mut future_targets = Vec::with_capacity(b * m * tau);
        let mut future_raw = Vec::with_capacity(b * m * tau);
        let mut target_offset = Vec::with_capacity(b * m);
        let target_scale: Vec<f64> = (0..m).map(|c| standardizer.channels[c].std).collect();

        for w in windows {
            let s = ds.series.get(w.series).ok_or_else(|| {
                LfitError::Contract(format!("window references series {}", w.series))
            })?;
            if w.start + k + tau > s.len() {
                return Err(LfitError::Contract(format!(
                    "window at {} exceeds series {} of length {}",
                    w.start,
                    s.id,
                    s.len()
                )));
            }
            let last = w.start + k - 1;
            let column = |c: usize, t: usize| -> f64 {
                if c < n_ds {
                    s.values[c][t]
                } else {
                    s.steps[t] as f64
                }
            };
            // dataset column of each past continuous slot
            let slot_col = |slot: usize| -> usize {
                if slot < m + n_obs + n_known_user {
                    slot
                } else {
                    n_ds
                }
            };
            for slot in 0..n_past_cont {
                let c = slot_col(slot);
                let sc = &standardizer.channels[c];
                let anchor = column(c, last);
                for t in w.start..w.start + k {
                    past_continuous[slot].push(sc.transform(column(c, t), anchor));
                }
            }
            for j in 0..n_known {
                let c = slot_col(m + n_obs + j);
                let sc = &standardizer.channels[c];
                let anchor = column(c, last);
                for t in w.start + k..w.start + k + tau {
                    future_continuous[j].push(sc.transform(column(c, t), anchor));
                }
            }
            if n_cat > 0 {
                for t in w.start..w.start + k {
                    past_categorical[0].push(s.months[t] as usize - 1);
                    past_categorical[1].push(season_of(s.months[t]));
                }
                for t in w.start + k..w.start + k + tau {
                    future_categorical[0].push(s.months[t] as usize - 1);
                    future_categorical[1].push(season_of(s.months[t]));
                }
            }
            let idx = static_index.get(w.series).ok_or_else(|| {
                LfitError::Contract(format!("no static indices for series {}", s.id))
            })?;
            if idx.len() != statics.len() {
                return Err(LfitError::Contract(format!(
                    "series {} has {} static indices, schema expects {}",
                    s.id,
                    idx.len(),
                    statics.len()
                )));
            }
            for (a, &ix) in idx.iter().enumerate() {
                statics[a].push(ix);
            }
            for c in 0..m {
                let sc = &standardizer.channels[c];
                let anchor = s.values[c][last];
                target_offset.push(sc.offset(anchor));
                if with_targets {
                    for t in w.start + k..w.start + k + tau {
                        let y = s.values[c][t];
                        future_raw.push(y);
                        future_targets.push(sc.transform(y, anchor));
                    }
                }
            }
        }
        Ok(Self {
            encoder_len: k,
            horizon: tau,
            windows: windows.to_vec(),
            past_continuous,
            past_categorical,
            future_continuous,
            future_categorical,
            statics,
            future_targets: with_targets.then_some(future_targets),
            future_targets_raw: with_targets.then_some(future_raw),
            target_offset,
            target_scale,
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn n_targets(&self) -> usize {
        self.target_scale.len()
    }

    /// Rows `rows` of this batch, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let (k, tau, m) = (self.encoder_len, self.horizon, self.n_targets());
        let pick = |col: &Vec<f64>, width: usize| -> Vec<f64> {
            rows.iter()
                .flat_map(|&r| col[r * width..(r + 1) * width].iter().copied())
                .collect()
        };
        let pick_ix = |col: &Vec<usize>, width: usize| -> Vec<usize> {
            rows.iter()
                .flat_map(|&r| col[r * width..(r + 1) * width].iter().copied())
                .collect()
        };
        Self {
            encoder_len: k,
            horizon: tau,
            windows: rows.iter().map(|&r| self.windows[r]).collect(),
            past_continuous: self.past_continuous.iter().map(|c| pick(c, k)).collect(),
            past_categorical: self.past_categorical.iter().map(|c| pick_ix(c, k)).collect(),
            future_continuous: self.future_continuous.iter().map(|c| pick(c, tau)).collect(),
            future_categorical: self.future_categorical.iter().map(|c| pick_ix(c, tau)).collect(),
            statics: self.statics.iter().map(|c| pick_ix(c, 1)).collect(),
            future_targets: self.future_targets.as_ref().map(|c| pick(c, m * tau)),
            future_targets_raw: self.future_targets_raw.as_ref().map(|c| pick(c, m * tau)),
            target_offset: pick(&self.target_offset, m),
            target_scale: self.target_scale.clone(),
        }
    }

    /// Maps a standardized target value of row `b`, target `m` back to raw units.
    pub fn destandardize(&self, b: usize, m: usize, z: f64) -> f64 {
        self.target_offset[b * self.n_targets() + m] + self.target_scale[m] * z
    }

    /// Checks every input value is finite, naming the first bad channel.
    pub fn check_finite(&self, schema: &ChannelSchema) -> Result<()> {
        let past = schema.past_continuous();
        for (c, col) in self.past_continuous.iter().enumerate() {
            if col.iter().any(|v| !v.is_finite()) {
                return Err(LfitError::Data(format!("non-finite input in channel {}", past[c])));
            }
        }
        for (c, col) in self.future_continuous.iter().enumerate() {
            if col.iter().any(|v| !v.is_finite()) {
                return Err(LfitError::Data(format!(
                    "non-finite input in channel {}",
                    schema.known_continuous[c]
                )));
            }
        }
        Ok(())
    }
}

/// Appends `tau` steps past the end of every series so the last `k` steps
/// can serve as an encoder for a genuine out-of-sample forecast. Appended
/// cells are `NaN` and never read: only calendar channels are derivable
/// beyond the data, so user known-future channels are an error.
pub fn extend_for_forecast(ds: &SeriesDataset, tau: usize) -> Result<SeriesDataset> {
    if !ds.known.is_empty() {
        return Err(LfitError::Data(format!(
            "known-future channels {:?} have no values beyond the data end",
            ds.known
        )));
    }
    let mut out = ds.clone();
    for s in &mut out.series {
        let calendar_by_step = s
            .steps
            .iter()
            .zip(&s.months)
            .all(|(&st, &mo)| super::month_of_step(st) == mo);
        let last = *s.steps.last().ok_or_else(|| LfitError::Data(format!("series {} is empty", s.id)))?;
        let last_month = *s.months.last().unwrap();
        for i in 1..=tau as i64 {
            s.steps.push(last + i);
            s.months.push(if calendar_by_step {
                super::month_of_step(last + i)
            } else {
                ((last_month as i64 - 1 + i).rem_euclid(12) + 1) as u8
            });
            for c in &mut s.values {
                c.push(f64::NAN);
            }
        }
    }
    Ok(out)
}
