//! The four experiment configurations: which channels are targets, which are
//! covariates and which static attributes are used.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Series, SeriesDataset, POINT_LABEL};
use crate::error::{LfitError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// One target, neighbouring sites' targets as covariates.
    #[serde(rename = "ST-NSP")]
    StNsp,
    /// All targets jointly, monitoring-point label as the only static.
    #[serde(rename = "MT-MPC")]
    MtMpc,
    /// ST-NSP plus environmental covariates.
    #[serde(rename = "ST-NSP-EV")]
    StNspEv,
    /// MT-MPC plus all static attributes and environmental covariates.
    #[serde(rename = "MT-MPC-PK-EV")]
    MtMpcPkEv,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Self::StNsp, Self::MtMpc, Self::StNspEv, Self::MtMpcPkEv];

    pub fn name(self) -> &'static str {
        match self {
            Self::StNsp => "ST-NSP",
            Self::MtMpc => "MT-MPC",
            Self::StNspEv => "ST-NSP-EV",
            Self::MtMpcPkEv => "MT-MPC-PK-EV",
        }
    }

    pub fn single_target(self) -> bool {
        matches!(self, Self::StNsp | Self::StNspEv)
    }

    pub fn environmental(self) -> bool {
        matches!(self, Self::StNspEv | Self::MtMpcPkEv)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = LfitError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                LfitError::Config(format!(
                    "unknown scenario {s:?}; expected one of ST-NSP, MT-MPC, ST-NSP-EV, MT-MPC-PK-EV"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    /// Series forecast by single-target scenarios (default: first series).
    #[serde(default)]
    pub target_series: Option<String>,
    /// Target channel for single-target scenarios (default: first target).
    #[serde(default)]
    pub target_channel: Option<String>,
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            target_series: None,
            target_channel: None,
        }
    }
}

/// Name of channel `channel` of site `series` when routed as a covariate.
pub fn neighbor_channel(channel: &str, series: &str) -> String {
    format!("{channel}@{series}")
}

/// Rewires channel roles of `ds` for the scenario.
pub fn apply_scenario(ds: &SeriesDataset, spec: &ScenarioSpec) -> Result<SeriesDataset> {
    ds.validate()?;
    if spec.scenario.environmental() && ds.observed.is_empty() {
        return Err(LfitError::Config(format!(
            "{} needs environmental covariates, the dataset has none",
            spec.scenario
        )));
    }
    if spec.scenario.single_target() {
        single_target(ds, spec)
    } else {
        multi_target(ds, spec)
    }
}

fn multi_target(ds: &SeriesDataset, spec: &ScenarioSpec) -> Result<SeriesDataset> {
    let env = spec.scenario.environmental();
    if spec.scenario == Scenario::MtMpcPkEv && ds.static_attrs.is_empty() {
        return Err(LfitError::Config(
            "MT-MPC-PK-EV needs static attributes (prior knowledge), the dataset has none".into(),
        ));
    }
    let m = ds.targets.len();
    let n_obs = ds.observed.len();
    let mut static_attrs = vec![String::from(POINT_LABEL)];
    if env {
        static_attrs.extend(ds.static_attrs.iter().filter(|a| *a != POINT_LABEL).cloned());
    }
    let keep_static: Vec<usize> = static_attrs[1..]
        .iter()
        .map(|a| ds.static_attrs.iter().position(|x| x == a).unwrap())
        .collect();
    let series = ds
        .series
        .iter()
        .map(|s| {
            let mut values: Vec<Vec<f64>> = s.values[..m].to_vec();
            if env {
                values.extend(s.values[m..m + n_obs].iter().cloned());
            }
            values.extend(s.values[m + n_obs..].iter().cloned());
            let mut statics = vec![s.id.clone()];
            statics.extend(keep_static.iter().map(|&i| s.statics[i].clone()));
            Series {
                id: s.id.clone(),
                steps: s.steps.clone(),
                months: s.months.clone(),
                values,
                statics,
            }
        })
        .collect();
    let out = SeriesDataset {
        targets: ds.targets.clone(),
        observed: if env { ds.observed.clone() } else { vec![] },
        known: ds.known.clone(),
        static_attrs,
        cumulative: if env { ds.cumulative.clone() } else { vec![] },
        calendar: ds.calendar,
        series,
    };
    out.validate()?;
    Ok(out)
}

fn single_target(ds: &SeriesDataset, spec: &ScenarioSpec) -> Result<SeriesDataset> {
    let env = spec.scenario.environmental();
    let target_idx = match &spec.target_series {
        Some(id) => ds
            .series
            .iter()
            .position(|s| &s.id == id)
            .ok_or_else(|| LfitError::Config(format!("target series {id} not in dataset")))?,
        None => 0,
    };
    let target_ch = match &spec.target_channel {
        Some(c) => ds
            .targets
            .iter()
            .position(|t| t == c)
            .ok_or_else(|| LfitError::Config(format!("{c} is not a target channel")))?,
        None => 0,
    };
    let m = ds.targets.len();
    let n_obs = ds.observed.len();
    let target = &ds.series[target_idx];

    // common step range of all sites
    let lo = ds.series.iter().map(|s| s.steps[0]).max().unwrap();
    let hi = ds.series.iter().map(|s| *s.steps.last().unwrap()).min().unwrap();
    if lo > hi {
        return Err(LfitError::Data("series share no common time range".into()));
    }
    let range = |s: &Series| {
        let a = (lo - s.steps[0]) as usize;
        let b = (hi - s.steps[0]) as usize + 1;
        a..b
    };
    let r = range(target);

    let mut observed = Vec::new();
    let mut cumulative = Vec::new();
    let mut values = vec![target.values[target_ch][r.clone()].to_vec()];
    // the site's own further targets, then every other site's targets
    for c in (0..m).filter(|&c| c != target_ch) {
        let name = neighbor_channel(&ds.targets[c], &target.id);
        values.push(target.values[c][r.clone()].to_vec());
        cumulative.push(name.clone());
        observed.push(name);
    }
    for (i, s) in ds.series.iter().enumerate() {
        if i == target_idx {
            continue;
        }
        let rs = range(s);
        for c in 0..m {
            let name = neighbor_channel(&ds.targets[c], &s.id);
            values.push(s.values[c][rs.clone()].to_vec());
            cumulative.push(name.clone());
            observed.push(name);
        }
    }
    if env {
        for c in 0..n_obs {
            values.push(target.values[m + c][r.clone()].to_vec());
            observed.push(ds.observed[c].clone());
        }
        cumulative.extend(ds.cumulative.iter().cloned());
    }
    for c in m + n_obs..target.values.len() {
        values.push(target.values[c][r.clone()].to_vec());
    }
    let mut seen = BTreeMap::new();
    for o in &observed {
        if seen.insert(o.clone(), ()).is_some() {
            return Err(LfitError::Data(format!("duplicate covariate name {o}")));
        }
    }
    let out = SeriesDataset {
        targets: vec![ds.targets[target_ch].clone()],
        observed,
        known: ds.known.clone(),
        static_attrs: vec![],
        cumulative,
        calendar: ds.calendar,
        series: vec![Series {
            id: target.id.clone(),
            steps: target.steps[r.clone()].to_vec(),
            months: target.months[r].to_vec(),
            values,
            statics: vec![],
        }],
    };
    out.validate()?;
    Ok(out)
}

impl ScenarioSpec {
    /// Short label such as `ST-NSP[P01]`.
    pub fn label(&self) -> String {
        match &self.target_series {
            Some(t) => format!("{}[{t}]", self.scenario),
            None => self.scenario.name().into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::month_of_step;
    use alloc::string::ToString;

    fn site(id: &str, offset: f64, statics: &[&str]) -> Series {
        let n = 10;
        Series {
            id: id.into(),
            steps: (0..n).collect(),
            months: (0..n).map(month_of_step).collect(),
            values: vec![
                (0..n).map(|t| t as f64 + offset).collect(),
                (0..n).map(|t| (t % 3) as f64).collect(),
            ],
            statics: statics.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn nine_sites() -> SeriesDataset {
        SeriesDataset {
            targets: vec!["disp".into()],
            observed: vec!["rain".into()],
            known: vec![],
            static_attrs: vec!["danger".into()],
            cumulative: vec![],
            calendar: true,
            series: (0..9).map(|i| site(&format!("S{i}"), i as f64, &["danger"])).collect(),
        }
    }

    #[test]
    fn st_nsp_routes_neighbours() {
        let ds = nine_sites();
        let out = apply_scenario(&ds, &ScenarioSpec::new(Scenario::StNsp)).unwrap();
        assert_eq!(out.targets, vec!["disp"]);
        assert_eq!(out.observed.len(), 8);
        assert_eq!(out.series.len(), 1);
        assert!(out.static_attrs.is_empty());
        assert_eq!(out.series[0].values[1], ds.series[1].values[0]);
        assert_eq!(out.cumulative.len(), 8);
        let ev = apply_scenario(&ds, &ScenarioSpec::new(Scenario::StNspEv)).unwrap();
        assert_eq!(ev.observed.len(), 9);
        assert_eq!(ev.observed[8], "rain");
    }

    #[test]
    fn mt_mpc_uses_point_label_only() {
        let ds = nine_sites();
        let out = apply_scenario(&ds, &ScenarioSpec::new(Scenario::MtMpc)).unwrap();
        assert_eq!(out.series.len(), 9);
        assert_eq!(out.static_attrs, vec![POINT_LABEL]);
        assert!(out.observed.is_empty());
        assert_eq!(out.series[3].statics, vec!["S3"]);
        let pk = apply_scenario(&ds, &ScenarioSpec::new(Scenario::MtMpcPkEv)).unwrap();
        assert_eq!(pk.static_attrs, vec![POINT_LABEL, "danger"]);
        assert_eq!(pk.observed, vec!["rain"]);
    }

    #[test]
    fn pk_ev_without_statics_is_config_error() {
        let mut ds = nine_sites();
        ds.static_attrs.clear();
        for s in &mut ds.series {
            s.statics.clear();
        }
        assert!(matches!(
            apply_scenario(&ds, &ScenarioSpec::new(Scenario::MtMpcPkEv)),
            Err(LfitError::Config(_))
        ));
    }

    #[test]
    fn scenario_names_parse() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!("ST-XYZ".parse::<Scenario>().is_err());
    }
}
