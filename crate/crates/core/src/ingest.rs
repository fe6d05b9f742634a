//! Sensor CSV ingestion, quality-flag handling and alignment onto the
//! 15-minute nitrate grid.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lattice spacing of the nitrate grid.
pub const GRID_STEP_SECS: i64 = 15 * 60;
/// Default clock-skew tolerance for alignment.
pub const DEFAULT_TOLERANCE_SECS: i64 = 60;

/// Name of the time covariate appended by [`align`].
pub const TIME_COLUMN: &str = "time_days";
/// Turbidity series are stored as `log(turbidity + 1)` under this name.
pub const LOG_TURBIDITY: &str = "log_turbidity";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("ingest: cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("ingest: malformed CSV in {path}: {message}")]
    Csv { path: String, message: String },
    #[error("ingest: {path} is missing required column `{column}`")]
    Schema { path: String, column: String },
    #[error("ingest: {path} has no parseable rows")]
    EmptyInput { path: String },
    #[error("ingest: nitrate series is empty")]
    EmptyNitrate,
    #[error("ingest: every aligned row is invalid")]
    EmptyFrame,
    #[error("ingest: {} nitrate timestamps are off the 15-minute lattice (first: {})", .offenders.len(), .offenders.first().map(|t| t.to_rfc3339()).unwrap_or_default())]
    Alignment { offenders: Vec<DateTime<Utc>> },
    #[error("ingest: negative tolerance {0} s")]
    NegativeTolerance(i64),
    #[error("ingest: series {0} violates its invariants: {1}")]
    InvalidSeries(String, String),
}

/// One variable's timestamped measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSeries {
    pub variable: String,
    pub unit: String,
    pub timestamps: Vec<DateTime<Utc>>,
    pub values: Vec<f64>,
    /// `true` marks a failed quality check.
    pub qc_flags: Option<Vec<bool>>,
}

impl SensorSeries {
    /// Builds a series, checking ordering, lengths and finiteness.
    pub fn new(
        variable: impl Into<String>,
        unit: impl Into<String>,
        timestamps: Vec<DateTime<Utc>>,
        values: Vec<f64>,
        qc_flags: Option<Vec<bool>>,
    ) -> Result<Self, IngestError> {
        let variable = variable.into();
        let bad = |msg: &str| IngestError::InvalidSeries(variable.clone(), msg.to_string());
        if timestamps.len() != values.len() {
            return Err(bad("timestamps and values differ in length"));
        }
        if let Some(f) = &qc_flags {
            if f.len() != values.len() {
                return Err(bad("qc flags and values differ in length"));
            }
        }
        if timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("timestamps are not strictly increasing"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite value"));
        }
        Ok(Self {
            variable,
            unit: unit.into(),
            timestamps,
            values,
            qc_flags,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn flagged(&self, i: usize) -> bool {
        self.qc_flags.as_ref().is_some_and(|f| f[i])
    }
}

/// Column mapping for one variable inside a CSV file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesSchema {
    pub variable: String,
    pub unit: String,
    pub timestamp_column: String,
    pub value_column: String,
    /// Optional: when the column is absent from the file every row passes.
    pub qc_column: Option<String>,
}

impl SeriesSchema {
    /// The canonical one-file-per-variable layout: `timestamp,value[,qc_flag]`.
    pub fn canonical(variable: impl Into<String>, unit: impl Into<String>) -> Self {
        Self {
            variable: variable.into(),
            unit: unit.into(),
            timestamp_column: "timestamp".into(),
            value_column: "value".into(),
            qc_column: Some("qc_flag".into()),
        }
    }
}

/// Bookkeeping from [`load_series`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub unparseable: usize,
    pub duplicates: usize,
    pub rows_kept: usize,
}

/// Reads one variable from a CSV file.
///
/// Rows with unparseable timestamps or values are dropped and counted;
/// rows are sorted by time and, for duplicated timestamps, the row that
/// appears first in the file wins.
pub fn load_series(
    path: &Path,
    schema: &SeriesSchema,
) -> Result<(SensorSeries, LoadReport), IngestError> {
    let path_str = path.display().to_string();
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path_str.clone(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| IngestError::Csv {
            path: path_str.clone(),
            message: e.to_string(),
        })?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let ts_idx = find(&schema.timestamp_column).ok_or_else(|| IngestError::Schema {
        path: path_str.clone(),
        column: schema.timestamp_column.clone(),
    })?;
    let val_idx = find(&schema.value_column).ok_or_else(|| IngestError::Schema {
        path: path_str.clone(),
        column: schema.value_column.clone(),
    })?;
    let qc_idx = schema.qc_column.as_deref().and_then(find);

    let mut report = LoadReport::default();
    let mut rows: Vec<(DateTime<Utc>, f64, bool)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| IngestError::Csv {
            path: path_str.clone(),
            message: e.to_string(),
        })?;
        report.rows_read += 1;
        let ts = record
            .get(ts_idx)
            .and_then(|s| DateTime::parse_from_rfc3339(s).ok())
            .map(|t| t.with_timezone(&Utc));
        let value = record
            .get(val_idx)
            .and_then(|s| s.parse::<f64>().ok())
            .filter(|v| v.is_finite());
        let flag = match qc_idx.and_then(|i| record.get(i)) {
            None | Some("") => Some(false),
            Some("0") => Some(false),
            Some("1") => Some(true),
            Some(other) => other.parse::<f64>().ok().map(|f| f != 0.0),
        };
        match (ts, value, flag) {
            (Some(t), Some(v), Some(f)) => rows.push((t, v, f)),
            _ => report.unparseable += 1,
        }
    }
    if rows.is_empty() {
        return Err(IngestError::EmptyInput { path: path_str });
    }
    // Stable sort keeps file order among equal timestamps.
    rows.sort_by_key(|r| r.0);
    let before = rows.len();
    rows.dedup_by_key(|r| r.0);
    report.duplicates = before - rows.len();
    report.rows_kept = rows.len();

    let has_qc = qc_idx.is_some();
    let series = SensorSeries::new(
        schema.variable.clone(),
        schema.unit.clone(),
        rows.iter().map(|r| r.0).collect(),
        rows.iter().map(|r| r.1).collect(),
        has_qc.then(|| rows.iter().map(|r| r.2).collect()),
    )?;
    Ok((series, report))
}

/// Writes a series in the canonical `timestamp,value,qc_flag` layout.
pub fn write_series(path: &Path, series: &SensorSeries) -> Result<(), IngestError> {
    let io = |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = std::io::BufWriter::new(File::create(path).map_err(io)?);
    writeln!(out, "timestamp,value,qc_flag").map_err(io)?;
    for i in 0..series.len() {
        writeln!(
            out,
            "{},{},{}",
            format_time(series.timestamps[i]),
            format_value(series.values[i]),
            u8::from(series.flagged(i))
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

/// A run of missing lattice instants between two consecutive grid rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gap {
    /// Last grid instant before the gap.
    pub start: DateTime<Utc>,
    /// First grid instant after the gap.
    pub end: DateTime<Utc>,
    /// Number of absent 15-minute rows.
    pub missing_rows: usize,
}

/// Response and covariates on the 15-minute nitrate grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedFrame {
    pub grid: Vec<DateTime<Utc>>,
    pub response_name: String,
    pub response: Vec<f64>,
    /// Ordered covariate columns; absent observations are `NaN`.
    pub covariates: Vec<(String, Vec<f64>)>,
    pub valid: Vec<bool>,
    pub gaps: Vec<Gap>,
}

impl AlignedFrame {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn covariate(&self, name: &str) -> Option<&[f64]> {
        self.covariates
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_slice())
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.covariates.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Indices of valid rows in time order.
    pub fn valid_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.valid[i]).collect()
    }

    /// Values of the response (or a covariate) restricted to valid rows.
    pub fn valid_column(&self, name: &str) -> Option<Vec<f64>> {
        let col = if name == self.response_name {
            self.response.as_slice()
        } else {
            self.covariate(name)?
        };
        Some(self.valid_rows().into_iter().map(|i| col[i]).collect())
    }

    /// Position of every grid row on the regular lattice starting at the
    /// first grid instant.
    pub fn lattice_positions(&self) -> Vec<usize> {
        let Some(first) = self.grid.first() else {
            return Vec::new();
        };
        self.grid
            .iter()
            .map(|t| ((t.timestamp() - first.timestamp()) / GRID_STEP_SECS) as usize)
            .collect()
    }

    /// Spreads per-valid-row values onto the full regular lattice, leaving
    /// `None` for invalid rows and for absent grid rows.
    pub fn to_lattice(&self, valid_values: &[f64]) -> Vec<Option<f64>> {
        let pos = self.lattice_positions();
        let len = pos.last().map_or(0, |p| p + 1);
        let mut out = vec![None; len];
        let mut it = valid_values.iter();
        for (i, &p) in pos.iter().enumerate() {
            if self.valid[i] {
                out[p] = it.next().copied();
            }
        }
        out
    }

    /// Rebuilds the per-variable series that [`align`] would map back onto
    /// this frame. Turbidity comes back already log-transformed and the time
    /// column is dropped since `align` recomputes it.
    pub fn to_series(&self) -> (SensorSeries, Vec<SensorSeries>) {
        let nitrate = SensorSeries {
            variable: self.response_name.clone(),
            unit: unit_for(&self.response_name).to_string(),
            timestamps: self.grid.clone(),
            values: self
                .response
                .iter()
                .map(|v| if v.is_finite() { *v } else { 0.0 })
                .collect(),
            qc_flags: Some(
                self.valid
                    .iter()
                    .zip(&self.response)
                    .map(|(ok, v)| !ok || !v.is_finite())
                    .collect(),
            ),
        };
        let others = self
            .covariates
            .iter()
            .filter(|(n, _)| n != TIME_COLUMN)
            .map(|(name, col)| {
                let keep: Vec<usize> = (0..col.len()).filter(|&i| col[i].is_finite()).collect();
                SensorSeries {
                    variable: name.clone(),
                    unit: unit_for(name).to_string(),
                    timestamps: keep.iter().map(|&i| self.grid[i]).collect(),
                    values: keep.iter().map(|&i| col[i]).collect(),
                    qc_flags: Some(vec![false; keep.len()]),
                }
            })
            .collect();
        (nitrate, others)
    }
}

/// Measurement units of the canonical variables.
pub fn unit_for(variable: &str) -> &'static str {
    match variable {
        "nitrate" => "µmol/L",
        "cond" => "µS/cm",
        "do" => "mg/L",
        "temp" => "°C",
        "turbidity" => "FNU",
        LOG_TURBIDITY => "log(FNU + 1)",
        "elevation" => "m a.s.l.",
        TIME_COLUMN => "days",
        _ => "",
    }
}

/// Variables whose negative readings are treated as sensor noise.
fn must_be_nonnegative(variable: &str) -> bool {
    matches!(variable, "turbidity" | "cond")
}

fn snap(t: DateTime<Utc>) -> i64 {
    let s = t.timestamp();
    let r = s.rem_euclid(GRID_STEP_SECS);
    if r * 2 < GRID_STEP_SECS {
        s - r
    } else {
        s - r + GRID_STEP_SECS
    }
}

/// Aligns covariates onto the nitrate grid.
///
/// Each nitrate timestamp is snapped to the nearest 15-minute lattice
/// instant (it must lie within `tolerance_secs` of it). For each covariate
/// the last observation at or before the grid instant, no older than
/// `tolerance_secs`, is taken. A row is invalid when nitrate or the chosen
/// covariate observation is flagged, when any covariate is absent, or when
/// turbidity/conductance is negative. Turbidity becomes `log(x + 1)` and a
/// fractional-day time column is appended.
pub fn align(
    nitrate: &SensorSeries,
    others: &[SensorSeries],
    tolerance_secs: i64,
) -> Result<AlignedFrame, IngestError> {
    if tolerance_secs < 0 {
        return Err(IngestError::NegativeTolerance(tolerance_secs));
    }
    if nitrate.is_empty() {
        return Err(IngestError::EmptyNitrate);
    }
    let mut offenders = Vec::new();
    let mut grid_secs: Vec<i64> = Vec::with_capacity(nitrate.len());
    let mut nitrate_rows: Vec<usize> = Vec::with_capacity(nitrate.len());
    for (i, t) in nitrate.timestamps.iter().enumerate() {
        let snapped = snap(*t);
        if (t.timestamp() - snapped).abs() > tolerance_secs {
            offenders.push(*t);
            continue;
        }
        if grid_secs.last() == Some(&snapped) {
            offenders.push(*t);
            continue;
        }
        grid_secs.push(snapped);
        nitrate_rows.push(i);
    }
    if !offenders.is_empty() {
        return Err(IngestError::Alignment { offenders });
    }

    let n = grid_secs.len();
    let grid: Vec<DateTime<Utc>> = grid_secs
        .iter()
        .map(|&s| DateTime::from_timestamp(s, 0).expect("timestamp in range"))
        .collect();
    let response: Vec<f64> = nitrate_rows.iter().map(|&i| nitrate.values[i]).collect();
    let mut valid: Vec<bool> = nitrate_rows.iter().map(|&i| !nitrate.flagged(i)).collect();

    let mut covariates = Vec::with_capacity(others.len() + 1);
    for series in others {
        let secs: Vec<i64> = series.timestamps.iter().map(|t| t.timestamp()).collect();
        let is_turbidity = series.variable == "turbidity";
        let nonneg = must_be_nonnegative(&series.variable);
        let mut column = vec![f64::NAN; n];
        for (row, &g) in grid_secs.iter().enumerate() {
            // last observation at or before g
            let idx = secs.partition_point(|&s| s <= g);
            let chosen = idx.checked_sub(1).filter(|&j| g - secs[j] <= tolerance_secs);
            match chosen {
                Some(j) => {
                    let raw = series.values[j];
                    if series.flagged(j) || (nonneg && raw < 0.0) {
                        valid[row] = false;
                    }
                    column[row] = if is_turbidity { raw.ln_1p() } else { raw };
                    if !column[row].is_finite() {
                        column[row] = f64::NAN;
                        valid[row] = false;
                    }
                }
                None => valid[row] = false,
            }
        }
        let name = if is_turbidity {
            LOG_TURBIDITY.to_string()
        } else {
            series.variable.clone()
        };
        covariates.push((name, column));
    }
    let t0 = grid_secs[0];
    covariates.push((
        TIME_COLUMN.to_string(),
        grid_secs
            .iter()
            .map(|&s| (s - t0) as f64 / 86_400.0)
            .collect(),
    ));
    if !valid.iter().any(|&v| v) {
        return Err(IngestError::EmptyFrame);
    }
    let gaps = gap_table(&grid);
    Ok(AlignedFrame {
        grid,
        response_name: nitrate.variable.clone(),
        response,
        covariates,
        valid,
        gaps,
    })
}

pub(crate) fn gap_table(grid: &[DateTime<Utc>]) -> Vec<Gap> {
    grid.windows(2)
        .filter_map(|w| {
            let steps = (w[1].timestamp() - w[0].timestamp()) / GRID_STEP_SECS;
            (steps > 1).then(|| Gap {
                start: w[0],
                end: w[1],
                missing_rows: (steps - 1) as usize,
            })
        })
        .collect()
}

fn format_time(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

/// 17 significant digits: enough for an exact round trip of any `f64`.
pub fn format_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        String::new()
    }
}

/// Writes the frame as a wide CSV: timestamp, response, covariates, valid.
pub fn write_frame_csv(frame: &AlignedFrame, out: &mut impl Write) -> std::io::Result<()> {
    write!(out, "timestamp,{}", frame.response_name)?;
    for (name, _) in &frame.covariates {
        write!(out, ",{name}")?;
    }
    writeln!(out, ",valid")?;
    for i in 0..frame.len() {
        write!(
            out,
            "{},{}",
            format_time(frame.grid[i]),
            format_value(frame.response[i])
        )?;
        for (_, col) in &frame.covariates {
            write!(out, ",{}", format_value(col[i]))?;
        }
        writeln!(out, ",{}", u8::from(frame.valid[i]))?;
    }
    Ok(())
}

pub fn save_frame(frame: &AlignedFrame, path: &Path) -> Result<(), IngestError> {
    let io = |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = std::io::BufWriter::new(File::create(path).map_err(io)?);
    write_frame_csv(frame, &mut out).map_err(io)?;
    out.flush().map_err(io)
}

/// Reads a wide CSV written by [`write_frame_csv`].
pub fn read_frame_csv(input: impl BufRead, source_name: &str) -> Result<AlignedFrame, IngestError> {
    let csv_err = |message: String| IngestError::Csv {
        path: source_name.to_string(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new().from_reader(input);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.len() < 3 || headers[0] != "timestamp" || headers.last().map(String::as_str) != Some("valid") {
        return Err(IngestError::Schema {
            path: source_name.to_string(),
            column: "timestamp/valid".into(),
        });
    }
    let ncov = headers.len() - 3;
    let mut grid = Vec::new();
    let mut response = Vec::new();
    let mut covs: Vec<Vec<f64>> = vec![Vec::new(); ncov];
    let mut valid = Vec::new();
    let parse = |s: &str| -> Result<f64, IngestError> {
        if s.is_empty() {
            Ok(f64::NAN)
        } else {
            s.parse::<f64>()
                .map_err(|e| csv_err(format!("bad number `{s}`: {e}")))
        }
    };
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(e.to_string()))?;
        if record.len() != headers.len() {
            return Err(csv_err(format!("row has {} fields", record.len())));
        }
        let t = DateTime::parse_from_rfc3339(&record[0])
            .map_err(|e| csv_err(format!("bad timestamp `{}`: {e}", &record[0])))?;
        grid.push(t.with_timezone(&Utc));
        response.push(parse(&record[1])?);
        for (c, col) in covs.iter_mut().enumerate() {
            col.push(parse(&record[2 + c])?);
        }
        valid.push(match &record[headers.len() - 1] {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(csv_err(format!("bad valid flag `{other}`"))),
        });
    }
    if grid.is_empty() {
        return Err(IngestError::EmptyInput {
            path: source_name.to_string(),
        });
    }
    let gaps = gap_table(&grid);
    Ok(AlignedFrame {
        grid,
        response_name: headers[1].clone(),
        response,
        covariates: headers[2..2 + ncov].iter().cloned().zip(covs).collect(),
        valid,
        gaps,
    })
}

pub fn load_frame(path: &Path) -> Result<AlignedFrame, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_frame_csv(BufReader::new(file), &path.display().to_string())
}

/// Box-plot style statistics for one column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub column: String,
    pub unit: String,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub max: f64,
    pub count: usize,
    pub missing: usize,
}

/// Linear interpolation between order statistics (`sorted` must be sorted).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Summary of a set of finite values; `None` when empty.
pub fn summarize_values(name: &str, values: &[f64], total_rows: usize) -> Option<ColumnSummary> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    Some(ColumnSummary {
        column: name.to_string(),
        unit: unit_for(name).to_string(),
        min: v[0],
        q1: quantile_sorted(&v, 0.25),
        median: quantile_sorted(&v, 0.5),
        mean,
        q3: quantile_sorted(&v, 0.75),
        max: v[v.len() - 1],
        count: v.len(),
        missing: total_rows - v.len(),
    })
}

/// Per-column statistics over the valid rows of the frame (response first,
/// then each covariate except the time index). `missing` counts grid rows
/// that did not contribute.
pub fn summarize(frame: &AlignedFrame) -> Result<Vec<ColumnSummary>, IngestError> {
    if frame.n_valid() == 0 {
        return Err(IngestError::EmptyFrame);
    }
    let mut names = vec![frame.response_name.clone()];
    names.extend(
        frame
            .covariate_names()
            .into_iter()
            .filter(|n| n != TIME_COLUMN),
    );
    Ok(names
        .iter()
        .filter_map(|name| {
            let values = frame.valid_column(name)?;
            summarize_values(name, &values, frame.len())
        })
        .collect())
}

/// Covariate columns restricted to valid rows, keyed by name.
pub fn valid_covariates(frame: &AlignedFrame, names: &[String]) -> BTreeMap<String, Vec<f64>> {
    names
        .iter()
        .filter_map(|n| Some((n.clone(), frame.valid_column(n)?)))
        .collect()
}
