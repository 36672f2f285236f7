use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Utc};

use crate::error::{Error, Result};

const REQUIRED: [&str; 5] = ["site_id", "timestamp", "easting_m", "northing_m", "temp_c"];
const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

/// One temperature reading.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub site_id: String,
    pub timestamp: DateTime<Utc>,
    /// Planar easting, metres.
    pub easting: f64,
    /// Planar northing, metres.
    pub northing: f64,
    pub temp_c: f64,
    /// Fold label 1..=k once assigned.
    pub fold: Option<u8>,
    /// Known fault label (synthetic data only).
    pub outlier_label: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationTable {
    pub rows: Vec<Observation>,
}

/// Rows that could not be parsed, with 1-based line numbers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub rejected: Vec<(usize, String)>,
}

impl LoadReport {
    pub fn rejected_count(&self) -> usize {
        self.rejected.len()
    }
}

impl ObservationTable {
    pub fn new(rows: Vec<Observation>) -> Self {
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Distinct site ids in sorted order.
    pub fn sites(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| r.site_id.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(str::to_string)
            .collect()
    }

    pub fn in_folds(&self, folds: &[u8]) -> ObservationTable {
        ObservationTable::new(
            self.rows
                .iter()
                .filter(|r| r.fold.is_some_and(|f| folds.contains(&f)))
                .cloned()
                .collect(),
        )
    }

    /// Earliest and latest timestamps.
    pub fn time_window(&self) -> Option<(DateTime<Utc>, DateTime<Utc>)> {
        let min = self.rows.iter().map(|r| r.timestamp).min()?;
        let max = self.rows.iter().map(|r| r.timestamp).max()?;
        Some((min, max))
    }

    /// Keeps rows with `start <= timestamp <= end`.
    pub fn restrict_window(&self, start: DateTime<Utc>, end: DateTime<Utc>) -> ObservationTable {
        ObservationTable::new(
            self.rows
                .iter()
                .filter(|r| r.timestamp >= start && r.timestamp <= end)
                .cloned()
                .collect(),
        )
    }
}

/// Dense index over a fixed list of site ids (the one-hot layout of the
/// outlier branch).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteIndex {
    ids: Vec<String>,
}

impl SiteIndex {
    pub fn new(mut ids: Vec<String>) -> Self {
        ids.sort();
        ids.dedup();
        Self { ids }
    }

    pub fn from_table(table: &ObservationTable) -> Self {
        Self { ids: table.sites() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, site: &str) -> Option<usize> {
        self.ids.binary_search_by(|s| s.as_str().cmp(site)).ok()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(|n| n.and_utc())
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.format(TIME_FORMAT).to_string()
}

pub fn load_observations(path: impl AsRef<Path>) -> Result<(ObservationTable, LoadReport)> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_observations(std::io::BufReader::new(f))
}

/// Parses the observation CSV. Required columns: `site_id, timestamp,
/// easting_m, northing_m, temp_c`; optional `fold` and `outlier_label`.
/// Unknown extra columns are ignored.
pub fn read_observations<R: Read>(reader: R) -> Result<(ObservationTable, LoadReport)> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let mut idx = [0usize; 5];
    for (slot, name) in idx.iter_mut().zip(REQUIRED) {
        *slot = col(name).ok_or_else(|| Error::Schema(format!("missing column `{name}`")))?;
    }
    let fold_col = col("fold");
    let label_col = col("outlier_label");

    let mut table = ObservationTable::default();
    let mut report = LoadReport::default();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                report.rejected.push((line, e.to_string()));
                continue;
            }
        };
        match parse_row(&rec, &idx, fold_col, label_col) {
            Ok(o) => table.rows.push(o),
            Err(msg) => report.rejected.push((line, msg)),
        }
    }
    Ok((table, report))
}

fn parse_row(
    rec: &csv::StringRecord,
    idx: &[usize; 5],
    fold_col: Option<usize>,
    label_col: Option<usize>,
) -> std::result::Result<Observation, String> {
    let field = |i: usize| rec.get(i).ok_or_else(|| format!("missing field {}", i + 1));
    let num = |i: usize, what: &str| -> std::result::Result<f64, String> {
        let s = field(i)?;
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(format!("unparseable {what} `{s}`")),
        }
    };
    let site_id = field(idx[0])?.to_string();
    if site_id.is_empty() {
        return Err("empty site_id".into());
    }
    let ts = field(idx[1])?;
    let timestamp = parse_timestamp(ts).ok_or_else(|| format!("unparseable timestamp `{ts}`"))?;
    let fold = match fold_col.and_then(|c| rec.get(c)).filter(|s| !s.is_empty()) {
        None => None,
        Some(s) => Some(s.parse::<u8>().map_err(|_| format!("unparseable fold `{s}`"))?),
    };
    let outlier_label = match label_col.and_then(|c| rec.get(c)).filter(|s| !s.is_empty()) {
        None => None,
        Some("0") | Some("false") => Some(false),
        Some("1") | Some("true") => Some(true),
        Some(s) => return Err(format!("unparseable outlier_label `{s}`")),
    };
    Ok(Observation {
        site_id,
        timestamp,
        easting: num(idx[2], "easting_m")?,
        northing: num(idx[3], "northing_m")?,
        temp_c: num(idx[4], "temp_c")?,
        fold,
        outlier_label,
    })
}

/// Writes the table in the same schema `read_observations` accepts. The
/// `fold` and `outlier_label` columns are emitted when any row carries them.
pub fn write_observations<W: Write>(table: &ObservationTable, writer: W) -> Result<()> {
    let with_fold = table.rows.iter().any(|r| r.fold.is_some());
    let with_label = table.rows.iter().any(|r| r.outlier_label.is_some());
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = REQUIRED.to_vec();
    if with_fold {
        header.push("fold");
    }
    if with_label {
        header.push("outlier_label");
    }
    w.write_record(&header)?;
    for r in &table.rows {
        let mut rec = vec![
            r.site_id.clone(),
            format_timestamp(&r.timestamp),
            r.easting.to_string(),
            r.northing.to_string(),
            r.temp_c.to_string(),
        ];
        if with_fold {
            rec.push(r.fold.map(|f| f.to_string()).unwrap_or_default());
        }
        if with_label {
            rec.push(r.outlier_label.map(|l| (l as u8).to_string()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}
