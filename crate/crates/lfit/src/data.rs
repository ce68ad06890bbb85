//! Long-format monitoring CSVs, their schema files and the statics sidecar.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate, NaiveDateTime};
use lfit_core::dataset::{finalize_raw, month_of_step, ChannelRole, IngestOptions, IngestReport, RawSeries, SeriesDataset};
use lfit_core::LfitError;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Spacing of consecutive steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    #[default]
    Monthly,
    Daily,
}

impl Resolution {
    pub fn step_of_date(self, d: NaiveDate) -> i64 {
        match self {
            Self::Monthly => d.year() as i64 * 12 + d.month0() as i64,
            Self::Daily => d.num_days_from_ce() as i64,
        }
    }

    /// Calendar month (1–12) of a step index.
    pub fn month_of(self, step: i64) -> u8 {
        match self {
            Self::Monthly => month_of_step(step),
            Self::Daily => i32::try_from(step)
                .ok()
                .and_then(NaiveDate::from_num_days_from_ce_opt)
                .map_or(1, |d| d.month() as u8),
        }
    }
}

/// Roles of the columns of a data file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSchema {
    pub series_column: String,
    pub timestamp_column: String,
    pub channels: BTreeMap<String, ChannelRole>,
    /// Target or observed channels holding cumulative quantities.
    pub cumulative: Vec<String>,
    /// Derive month, season and time-index known-future channels.
    pub calendar: bool,
    pub resolution: Resolution,
}

impl Default for DataSchema {
    fn default() -> Self {
        Self {
            series_column: "series_id".into(),
            timestamp_column: "timestamp".into(),
            channels: BTreeMap::new(),
            cumulative: vec![],
            calendar: true,
            resolution: Resolution::Monthly,
        }
    }
}

impl DataSchema {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        serde_json::from_str(&text).map_err(CliError::json(path))
    }

    /// Schema describing an in-memory dataset written with [`write_dataset`].
    pub fn of_dataset(ds: &SeriesDataset) -> Self {
        let mut channels = BTreeMap::new();
        let groups = [
            (&ds.targets, ChannelRole::Target),
            (&ds.observed, ChannelRole::Observed),
            (&ds.known, ChannelRole::KnownFuture),
            (&ds.static_attrs, ChannelRole::Static),
        ];
        for (names, role) in groups {
            for n in names {
                channels.insert(n.clone(), role);
            }
        }
        Self {
            channels,
            cumulative: ds.cumulative.clone(),
            calendar: ds.calendar,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Stamp {
    Step(i64),
    Date(NaiveDate),
}

fn parse_timestamp(s: &str) -> Option<Stamp> {
    if let Ok(i) = s.parse::<i64>() {
        return Some(Stamp::Step(i));
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Some(Stamp::Date(d));
    }
    for f in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, f) {
            return Some(Stamp::Date(t.date()));
        }
    }
    NaiveDate::parse_from_str(&format!("{s}-01"), "%Y-%m-%d").ok().map(Stamp::Date)
}

fn parse_cell(s: &str) -> std::result::Result<f64, ()> {
    match s {
        "" | "NA" | "NaN" | "nan" | "null" => Ok(f64::NAN),
        _ => s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or(()),
    }
}

fn data_err(path: &Path, line: u64, msg: impl std::fmt::Display) -> CliError {
    LfitError::Data(format!("{} line {line}: {msg}", path.display())).into()
}

struct Builder {
    raw: RawSeries,
    file_statics: Vec<Option<String>>,
}

/// Parses `series_id,timestamp,<channels>` rows, joins optional sidecar
/// statics, then drops sparse series and fills gaps.
pub fn load_csv(
    path: &Path,
    schema: &DataSchema,
    statics_path: Option<&Path>,
    opts: &IngestOptions,
) -> Result<(SeriesDataset, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(CliError::csv(path))?;
    let header: Vec<String> = rdr.headers().map_err(CliError::csv(path))?.iter().map(String::from).collect();
    let find = |name: &str| header.iter().position(|h| h == name);
    let sid_col = find(&schema.series_column)
        .ok_or_else(|| data_err(path, 1, format!("missing mandatory column {}", schema.series_column)))?;
    let ts_col = find(&schema.timestamp_column)
        .ok_or_else(|| data_err(path, 1, format!("missing mandatory column {}", schema.timestamp_column)))?;

    let (mut targets, mut observed, mut known, mut file_static) = (vec![], vec![], vec![], vec![]);
    for (i, h) in header.iter().enumerate() {
        if i == sid_col || i == ts_col {
            continue;
        }
        if header[..i].contains(h) {
            return Err(data_err(path, 1, format!("duplicate column {h}")));
        }
        match schema.channels.get(h) {
            Some(ChannelRole::Target) => targets.push((h.clone(), i)),
            Some(ChannelRole::Observed) => observed.push((h.clone(), i)),
            Some(ChannelRole::KnownFuture) => known.push((h.clone(), i)),
            Some(ChannelRole::Static) => file_static.push((h.clone(), i)),
            None => return Err(data_err(path, 1, format!("column {h} has no role in the schema"))),
        }
    }
    for (name, role) in &schema.channels {
        if *role != ChannelRole::Static && find(name).is_none() {
            return Err(data_err(path, 1, format!("missing column {name} ({role:?})")));
        }
    }
    for c in &schema.cumulative {
        if !targets.iter().chain(&observed).any(|(n, _)| n == c) {
            return Err(LfitError::Config(format!("cumulative channel {c} is not a target or observed column")).into());
        }
    }
    let channel_cols: Vec<usize> = targets.iter().chain(&observed).chain(&known).map(|(_, i)| *i).collect();

    let mut order: Vec<Builder> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    let mut dated: Option<bool> = None;
    for rec in rdr.records() {
        let rec = rec.map_err(CliError::csv(path))?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec.get(sid_col).unwrap_or("");
        if id.is_empty() {
            return Err(data_err(path, line, "empty series id"));
        }
        let ts = rec.get(ts_col).unwrap_or("");
        let stamp = parse_timestamp(ts).ok_or_else(|| data_err(path, line, format!("unparseable timestamp {ts:?}")))?;
        let is_date = matches!(stamp, Stamp::Date(_));
        if *dated.get_or_insert(is_date) != is_date {
            return Err(data_err(path, line, "mixed integer and calendar timestamps"));
        }
        let step = match stamp {
            Stamp::Step(s) => s,
            Stamp::Date(d) => schema.resolution.step_of_date(d),
        };
        let b = *by_id.entry(id.to_string()).or_insert_with(|| {
            order.push(Builder {
                raw: RawSeries {
                    id: id.to_string(),
                    steps: vec![],
                    months: vec![],
                    values: vec![vec![]; channel_cols.len()],
                    statics: vec![],
                },
                file_statics: vec![None; file_static.len()],
            });
            order.len() - 1
        });
        let b = &mut order[b];
        b.raw.steps.push(step);
        b.raw.months.push(schema.resolution.month_of(step));
        for (c, &col) in channel_cols.iter().enumerate() {
            let cell = rec.get(col).unwrap_or("");
            let v = parse_cell(cell)
                .map_err(|_| data_err(path, line, format!("column {}: invalid number {cell:?}", header[col])))?;
            b.raw.values[c].push(v);
        }
        for (a, (name, col)) in file_static.iter().enumerate() {
            let cell = rec.get(*col).unwrap_or("");
            if cell.is_empty() {
                continue;
            }
            match &b.file_statics[a] {
                Some(prev) if prev != cell => {
                    return Err(data_err(
                        path,
                        line,
                        format!("static {name} of series {id} changes from {prev:?} to {cell:?}"),
                    ))
                }
                _ => b.file_statics[a] = Some(cell.to_string()),
            }
        }
    }

    let mut static_attrs: Vec<String> = file_static.iter().map(|(n, _)| n.clone()).collect();
    let sidecar = match statics_path {
        Some(p) => Some(load_statics(p, schema, &static_attrs)?),
        None => None,
    };
    if let Some((names, _)) = &sidecar {
        static_attrs.extend(names.iter().cloned());
    }
    for (name, role) in &schema.channels {
        if *role == ChannelRole::Static && !static_attrs.contains(name) {
            return Err(LfitError::Data(format!(
                "static attribute {name} is neither a data column nor in the statics file"
            ))
            .into());
        }
    }
    let raw = order
        .into_iter()
        .map(|mut b| {
            b.raw.statics = b.file_statics;
            if let Some((names, rows)) = &sidecar {
                match rows.get(&b.raw.id) {
                    Some(v) => b.raw.statics.extend(v.iter().cloned().map(Some)),
                    None => b.raw.statics.extend(std::iter::repeat_n(None, names.len())),
                }
            }
            b.raw
        })
        .collect();
    let (mut ds, report) = finalize_raw(
        targets.into_iter().map(|(n, _)| n).collect(),
        observed.into_iter().map(|(n, _)| n).collect(),
        known.into_iter().map(|(n, _)| n).collect(),
        static_attrs,
        schema.cumulative.clone(),
        schema.calendar,
        raw,
        opts,
    )?;
    fix_months(&mut ds, schema.resolution);
    Ok((ds, report))
}

type StaticRows = (Vec<String>, HashMap<String, Vec<String>>);

fn load_statics(path: &Path, schema: &DataSchema, in_data: &[String]) -> Result<StaticRows> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(CliError::csv(path))?;
    let header: Vec<String> = rdr.headers().map_err(CliError::csv(path))?.iter().map(String::from).collect();
    if header.first() != Some(&schema.series_column) {
        return Err(data_err(path, 1, format!("first column must be {}", schema.series_column)));
    }
    let names = header[1..].to_vec();
    for n in &names {
        if schema.channels.get(n) != Some(&ChannelRole::Static) {
            return Err(data_err(path, 1, format!("column {n} is not a static attribute in the schema")));
        }
        if in_data.contains(n) {
            return Err(data_err(path, 1, format!("static {n} appears in both the data and the statics file")));
        }
    }
    let mut rows = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(CliError::csv(path))?;
        let line = rec.position().map_or(0, |p| p.line());
        let vals: Vec<String> = rec.iter().map(String::from).collect();
        if vals.iter().skip(1).any(String::is_empty) {
            return Err(data_err(path, line, "empty static value"));
        }
        if rows.insert(vals[0].clone(), vals[1..].to_vec()).is_some() {
            return Err(data_err(path, line, format!("duplicate series {}", vals[0])));
        }
    }
    Ok((names, rows))
}

/// Recomputes calendar months from step indices.
pub fn fix_months(ds: &mut SeriesDataset, resolution: Resolution) {
    for s in &mut ds.series {
        s.months = s.steps.iter().map(|&t| resolution.month_of(t)).collect();
    }
}

/// Writes `data.csv`, `schema.json` and, with static attributes, `statics.csv`.
pub fn write_dataset(ds: &SeriesDataset, dir: &Path) -> Result<Vec<PathBuf>> {
    let schema = DataSchema::of_dataset(ds);
    let data = dir.join("data.csv");
    let mut w = csv::Writer::from_path(&data).map_err(CliError::csv(&data))?;
    let mut header = vec![schema.series_column.clone(), schema.timestamp_column.clone()];
    header.extend(ds.continuous_channels());
    w.write_record(&header).map_err(CliError::csv(&data))?;
    for s in &ds.series {
        for t in 0..s.len() {
            let mut row = vec![s.id.clone(), s.steps[t].to_string()];
            row.extend(s.values.iter().map(|c| c[t].to_string()));
            w.write_record(&row).map_err(CliError::csv(&data))?;
        }
    }
    w.flush().map_err(CliError::io(&data))?;
    let mut written = vec![data];
    if !ds.static_attrs.is_empty() {
        let p = dir.join("statics.csv");
        let mut w = csv::Writer::from_path(&p).map_err(CliError::csv(&p))?;
        let mut header = vec![schema.series_column.clone()];
        header.extend(ds.static_attrs.iter().cloned());
        w.write_record(&header).map_err(CliError::csv(&p))?;
        for s in &ds.series {
            let mut row = vec![s.id.clone()];
            row.extend(s.statics.iter().cloned());
            w.write_record(&row).map_err(CliError::csv(&p))?;
        }
        w.flush().map_err(CliError::io(&p))?;
        written.push(p);
    }
    let p = dir.join("schema.json");
    write_json(&p, &schema)?;
    written.push(p);
    Ok(written)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(CliError::json(path))?;
    text.push('\n');
    fs::write(path, text).map_err(CliError::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use lfit_core::dataset::{generate_synthetic, SyntheticSpec};

    fn schema(pairs: &[(&str, ChannelRole)]) -> DataSchema {
        DataSchema {
            channels: pairs.iter().map(|(n, r)| (n.to_string(), *r)).collect(),
            ..Default::default()
        }
    }

    fn load(text: &str, s: &DataSchema) -> Result<(SeriesDataset, IngestReport)> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(&p, text).unwrap();
        load_csv(&p, s, None, &IngestOptions::default())
    }

    #[test]
    fn timestamps_and_months() {
        assert_eq!(parse_timestamp("17"), Some(Stamp::Step(17)));
        let d = NaiveDate::from_ymd_opt(2020, 3, 1).unwrap();
        assert_eq!(parse_timestamp("2020-03"), Some(Stamp::Date(d)));
        assert_eq!(parse_timestamp("2020-03-01T06:00:00"), Some(Stamp::Date(d)));
        assert_eq!(parse_timestamp("March"), None);
        let m = Resolution::Monthly.step_of_date(d);
        assert_eq!(Resolution::Monthly.month_of(m), 3);
        let day = Resolution::Daily.step_of_date(NaiveDate::from_ymd_opt(2021, 12, 31).unwrap());
        assert_eq!(Resolution::Daily.month_of(day), 12);
        assert_eq!(Resolution::Daily.month_of(day + 1), 1);
    }

    #[test]
    fn interior_gaps_interpolated_and_statics_joined() {
        let s = schema(&[("y", ChannelRole::Target), ("rain", ChannelRole::Observed), ("zone", ChannelRole::Static)]);
        let text = "series_id,timestamp,y,rain,zone\n\
                    a,2020-01,1,0,north\n\
                    a,2020-02,,0,\n\
                    a,2020-03,3,5,north\n\
                    b,2020-01,4,1,south\n\
                    b,2020-02,5,,south\n";
        let (ds, rep) = load(text, &s).unwrap();
        assert_eq!(ds.series[0].values[0], vec![1.0, 2.0, 3.0]);
        assert_eq!(ds.series[1].values[1], vec![1.0, 1.0]);
        assert_eq!(ds.series[0].months, vec![1, 2, 3]);
        assert_eq!(ds.series[1].statics, vec!["south"]);
        assert_eq!(rep.filled.len(), 2);
    }

    #[test]
    fn ingestion_errors_carry_context() {
        let s = schema(&[("y", ChannelRole::Target)]);
        let dup = load("series_id,timestamp,y\na,1,1\na,1,2\n", &s).unwrap_err();
        assert!(dup.to_string().contains("duplicate"), "{dup}");
        let ts = load("series_id,timestamp,y\na,1,1\na,soon,2\n", &s).unwrap_err();
        assert!(ts.to_string().contains("line 3"), "{ts}");
        let col = load("series_id,y\na,1\n", &s).unwrap_err();
        assert!(col.to_string().contains("timestamp"), "{col}");
        let extra = load("series_id,timestamp,y,z\na,1,1,2\n", &s).unwrap_err();
        assert!(extra.to_string().contains("no role"), "{extra}");
        let num = load("series_id,timestamp,y\na,1,abc\n", &s).unwrap_err();
        assert!(matches!(num, CliError::Core(LfitError::Data(_))));
    }

    #[test]
    fn sparse_series_dropped() {
        let s = schema(&[("y", ChannelRole::Target)]);
        let mut text = String::from("series_id,timestamp,y\n");
        for t in 0..10 {
            text += &format!("a,{t},{}\n", if t < 2 { "1" } else { "" });
            text += &format!("b,{t},{t}\n");
        }
        let (ds, rep) = load(&text, &s).unwrap();
        assert_eq!(ds.series.len(), 1);
        assert_eq!(rep.dropped[0].0, "a");
    }

    #[test]
    fn written_dataset_loads_back_identically() {
        let (ds, _) = generate_synthetic(&SyntheticSpec {
            series_count: 3,
            length: 30,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let schema = DataSchema::read(&dir.path().join("schema.json")).unwrap();
        let load = || {
            load_csv(
                &dir.path().join("data.csv"),
                &schema,
                Some(&dir.path().join("statics.csv")),
                &IngestOptions::default(),
            )
            .unwrap()
            .0
        };
        let back = load();
        assert_eq!(back, ds);
        assert_eq!(load(), back);
    }
}
