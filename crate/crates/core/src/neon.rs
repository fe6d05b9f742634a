//! Client for the NEON data API: file manifests, verified downloads and
//! extraction of sensor tables into the canonical per-variable CSV layout.
//!
//! Live access is opt-in. [`NeonClient::from_env`] uses the base URL in
//! `NEON_API_BASE_URL` when set (a mock server in tests) and otherwise
//! refuses unless `live` is requested.

use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::NaiveDate;
use md5::{Digest, Md5};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::ingest::{load_series, write_series, IngestError, SensorSeries, SeriesSchema};

pub const DEFAULT_BASE_URL: &str = "https://data.neonscience.org/api/v0";
pub const BASE_URL_ENV: &str = "NEON_API_BASE_URL";
pub const DEFAULT_RELEASE: &str = "RELEASE-2021";
pub const DEFAULT_WORKERS: usize = 4;
pub const MAX_RETRIES: u32 = 3;

/// Nitrate in surface water.
pub const NITRATE_PRODUCT: &str = "DP1.20033.001";
/// Elevation of surface water.
pub const ELEVATION_PRODUCT: &str = "DP1.20016.001";
/// Water quality: conductance, dissolved oxygen, turbidity.
pub const WATER_QUALITY_PRODUCT: &str = "DP1.20288.001";
/// Temperature (PRT) in surface water.
pub const TEMPERATURE_PRODUCT: &str = "DP1.20053.001";

#[derive(Debug, Error)]
pub enum NeonError {
    #[error("neon: invalid request: {0}")]
    InvalidRequest(String),
    #[error("neon: live API access is disabled; pass --live or set {BASE_URL_ENV}")]
    LiveDisabled,
    #[error("neon: not found: {0}")]
    NotFound(String),
    #[error("neon: HTTP {status} from {url}")]
    Http { status: u16, url: String },
    #[error("neon: transport error for {url} after {attempts} attempts: {message}")]
    Transport { url: String, attempts: u32, message: String },
    #[error("neon: malformed manifest from {url}: {message}")]
    Manifest { url: String, message: String },
    #[error("neon: checksum mismatch for {name}: expected {expected}, got {actual}")]
    Integrity { name: String, expected: String, actual: String },
    #[error("neon: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("neon: {0}")]
    Ingest(#[from] IngestError),
    #[error("neon: no files for `{table}` among the downloads")]
    MissingTable { table: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NeonError + '_ {
    move |source| NeonError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductRequest {
    pub product_id: String,
    pub site_code: String,
    /// `YYYY-MM`.
    pub months: Vec<String>,
    pub release_tag: Option<String>,
}

fn valid_product_id(id: &str) -> bool {
    let b = id.as_bytes();
    let digits = |r: std::ops::Range<usize>| b[r].iter().all(u8::is_ascii_digit);
    b.len() == 13
        && &b[..2] == b"DP"
        && digits(2..3)
        && b[3] == b'.'
        && digits(4..9)
        && b[9] == b'.'
        && digits(10..13)
}

impl ProductRequest {
    pub fn new(product_id: &str, site_code: &str, months: &[&str]) -> Result<Self, NeonError> {
        let req = Self {
            product_id: product_id.to_string(),
            site_code: site_code.to_string(),
            months: months.iter().map(|m| m.to_string()).collect(),
            release_tag: Some(DEFAULT_RELEASE.to_string()),
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<(), NeonError> {
        let bad = |m: String| Err(NeonError::InvalidRequest(m));
        if !valid_product_id(&self.product_id) {
            return bad(format!("product id `{}` is not of the form DPx.xxxxx.xxx", self.product_id));
        }
        if self.site_code.len() != 4 || !self.site_code.bytes().all(|c| c.is_ascii_uppercase()) {
            return bad(format!("site code `{}` is not four capital letters", self.site_code));
        }
        if self.months.is_empty() {
            return bad("no months requested".into());
        }
        for m in &self.months {
            if m.len() != 7 || NaiveDate::parse_from_str(&format!("{m}-01"), "%Y-%m-%d").is_err() {
                return bad(format!("`{m}` is not a calendar month YYYY-MM"));
            }
        }
        Ok(())
    }
}

/// Expands an inclusive `YYYY-MM` range.
pub fn month_range(from: &str, to: &str) -> Result<Vec<String>, NeonError> {
    let parse = |m: &str| {
        NaiveDate::parse_from_str(&format!("{m}-01"), "%Y-%m-%d")
            .map_err(|_| NeonError::InvalidRequest(format!("`{m}` is not a calendar month YYYY-MM")))
    };
    let (a, b) = (parse(from)?, parse(to)?);
    if a > b {
        return Err(NeonError::InvalidRequest(format!("month range {from}..{to} is empty")));
    }
    let mut out = Vec::new();
    let mut d = a;
    while d <= b {
        out.push(d.format("%Y-%m").to_string());
        d = d
            .checked_add_months(chrono::Months::new(1))
            .expect("month in range");
    }
    Ok(out)
}

/// One entry of a monthly file manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub url: String,
    pub name: String,
    pub size: Option<u64>,
    pub checksum: Option<Checksum>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "algorithm", content = "hex", rename_all = "lowercase")]
pub enum Checksum {
    Md5(String),
    Crc32(String),
}

impl Checksum {
    fn hex(&self) -> &str {
        match self {
            Checksum::Md5(h) | Checksum::Crc32(h) => h,
        }
    }
}

#[derive(Deserialize)]
struct ManifestEnvelope {
    data: ManifestData,
}

#[derive(Deserialize)]
struct ManifestData {
    #[serde(default)]
    files: Vec<RawFile>,
}

#[derive(Deserialize)]
struct RawFile {
    name: String,
    url: String,
    #[serde(default)]
    size: Option<serde_json::Value>,
    #[serde(default)]
    md5: Option<String>,
    #[serde(default)]
    crc32: Option<String>,
}

impl RawFile {
    fn into_entry(self) -> FileEntry {
        let size = match self.size {
            Some(serde_json::Value::Number(n)) => n.as_u64(),
            Some(serde_json::Value::String(s)) => s.parse().ok(),
            _ => None,
        };
        let checksum = match (self.md5, self.crc32) {
            (Some(m), _) if !m.is_empty() => Some(Checksum::Md5(m.to_ascii_lowercase())),
            (_, Some(c)) if !c.is_empty() => Some(Checksum::Crc32(c.to_ascii_lowercase())),
            _ => None,
        };
        FileEntry {
            url: self.url,
            name: self.name,
            size,
            checksum,
        }
    }
}

/// Outcome of [`NeonClient::fetch`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchReport {
    /// Local paths in manifest order.
    pub paths: Vec<PathBuf>,
    pub downloaded: usize,
    pub cached: usize,
    pub bytes_transferred: u64,
}

#[derive(Debug, Clone)]
pub struct NeonClient {
    agent: ureq::Agent,
    base_url: String,
    max_retries: u32,
    backoff: Duration,
    workers: usize,
}

enum Attempt<T> {
    Done(T),
    Retry(String),
}

impl NeonClient {
    pub fn new(base_url: &str) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(300)))
            .build()
            .into();
        Self {
            agent,
            base_url: base_url.trim_end_matches('/').to_string(),
            max_retries: MAX_RETRIES,
            backoff: Duration::from_millis(500),
            workers: DEFAULT_WORKERS,
        }
    }

    pub fn from_env(live: bool) -> Result<Self, NeonError> {
        match std::env::var(BASE_URL_ENV) {
            Ok(url) if !url.is_empty() => Ok(Self::new(&url)),
            _ if live => Ok(Self::new(DEFAULT_BASE_URL)),
            _ => Err(NeonError::LiveDisabled),
        }
    }

    /// First retry waits `backoff`, then doubles.
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn with_retries<T>(
        &self,
        url: &str,
        mut call: impl FnMut() -> Result<Attempt<T>, NeonError>,
    ) -> Result<T, NeonError> {
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                let wait = self.backoff * 2u32.pow(attempt - 1);
                warn!(url, attempt, ?wait, error = %last, "retrying");
                std::thread::sleep(wait);
            }
            match call()? {
                Attempt::Done(v) => return Ok(v),
                Attempt::Retry(msg) => last = msg,
            }
        }
        Err(NeonError::Transport {
            url: url.to_string(),
            attempts: self.max_retries + 1,
            message: last,
        })
    }

    /// GET with status classification: 2xx done, 400/404 not found, 429
    /// and 5xx retried, anything else fatal.
    fn get(&self, url: &str, query: &[(&str, &str)]) -> Result<ureq::http::Response<ureq::Body>, NeonError> {
        self.with_retries(url, || {
            let mut req = self.agent.get(url);
            for (k, v) in query {
                req = req.query(*k, *v);
            }
            match req.call() {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    match status {
                        200..=299 => Ok(Attempt::Done(resp)),
                        400 | 404 => Err(NeonError::NotFound(url.to_string())),
                        429 | 500..=599 => Ok(Attempt::Retry(format!("HTTP {status}"))),
                        _ => Err(NeonError::Http {
                            status,
                            url: url.to_string(),
                        }),
                    }
                }
                Err(e) => Ok(Attempt::Retry(e.to_string())),
            }
        })
    }

    /// Manifest of every requested month, sorted by file name. A name seen
    /// in several months keeps its first entry.
    pub fn list_files(&self, req: &ProductRequest) -> Result<Vec<FileEntry>, NeonError> {
        req.validate()?;
        let mut months = req.months.clone();
        months.sort();
        months.dedup();
        let mut all = Vec::new();
        for month in &months {
            let url = format!("{}/data/{}/{}/{}", self.base_url, req.product_id, req.site_code, month);
            let mut query = vec![("package", "basic")];
            if let Some(tag) = &req.release_tag {
                query.push(("release", tag.as_str()));
            }
            let text = self.with_retries(&url, || {
                let mut resp = self.get(&url, &query)?;
                match resp.body_mut().read_to_string() {
                    Ok(t) => Ok(Attempt::Done(t)),
                    Err(e) => Ok(Attempt::Retry(e.to_string())),
                }
            })?;
            let env: ManifestEnvelope = serde_json::from_str(&text).map_err(|e| NeonError::Manifest {
                url: url.clone(),
                message: e.to_string(),
            })?;
            debug!(month, files = env.data.files.len(), "manifest");
            all.extend(env.data.files.into_iter().map(RawFile::into_entry));
        }
        all.sort_by(|a, b| a.name.cmp(&b.name));
        all.dedup_by(|b, a| a.name == b.name);
        Ok(all)
    }

    /// Downloads every manifest file into `dest`, skipping files already
    /// present with a matching checksum. Downloads go to `<name>.part` and
    /// are renamed only after verification.
    pub fn fetch(&self, req: &ProductRequest, dest: &Path) -> Result<FetchReport, NeonError> {
        let entries = self.list_files(req)?;
        fs::create_dir_all(dest).map_err(io_err(dest))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .expect("thread pool");
        let results: Vec<Result<(PathBuf, Option<u64>), NeonError>> =
            pool.install(|| entries.par_iter().map(|e| self.fetch_one(e, dest)).collect());
        let mut report = FetchReport {
            paths: Vec::with_capacity(entries.len()),
            downloaded: 0,
            cached: 0,
            bytes_transferred: 0,
        };
        for r in results {
            let (path, bytes) = r?;
            match bytes {
                Some(b) => {
                    report.downloaded += 1;
                    report.bytes_transferred += b;
                }
                None => report.cached += 1,
            }
            report.paths.push(path);
        }
        info!(
            downloaded = report.downloaded,
            cached = report.cached,
            bytes = report.bytes_transferred,
            "fetch done"
        );
        Ok(report)
    }

    /// `Some(bytes)` when downloaded, `None` when served from cache.
    fn fetch_one(&self, entry: &FileEntry, dest: &Path) -> Result<(PathBuf, Option<u64>), NeonError> {
        if entry.name.is_empty()
            || entry.name.contains(['/', '\\'])
            || entry.name == "."
            || entry.name == ".."
        {
            return Err(NeonError::Manifest {
                url: entry.url.clone(),
                message: format!("unsafe file name `{}`", entry.name),
            });
        }
        let path = dest.join(&entry.name);
        if path.exists() && verify_file(&path, entry)?.is_ok() {
            debug!(name = entry.name, "cached");
            return Ok((path, None));
        }
        let part = dest.join(format!("{}.part", entry.name));
        let result = self.download(entry, &part).and_then(|bytes| {
            if let Err((expected, actual)) = verify_file(&part, entry)? {
                return Err(NeonError::Integrity {
                    name: entry.name.clone(),
                    expected,
                    actual,
                });
            }
            fs::rename(&part, &path).map_err(io_err(&path))?;
            Ok(bytes)
        });
        match result {
            Ok(bytes) => Ok((path, Some(bytes))),
            Err(e) => {
                let _ = fs::remove_file(&part);
                Err(e)
            }
        }
    }

    fn download(&self, entry: &FileEntry, part: &Path) -> Result<u64, NeonError> {
        self.with_retries(&entry.url, || {
            let resp = self.get(&entry.url, &[])?;
            let mut file = File::create(part).map_err(io_err(part))?;
            let mut reader = resp.into_body().into_reader();
            match std::io::copy(&mut reader, &mut file) {
                Ok(n) => {
                    file.flush().map_err(io_err(part))?;
                    Ok(Attempt::Done(n))
                }
                Err(e) => Ok(Attempt::Retry(e.to_string())),
            }
        })
    }
}

/// `Ok(Ok(()))` when the file matches the manifest's size and checksum,
/// `Ok(Err((expected, actual)))` on a mismatch.
fn verify_file(path: &Path, entry: &FileEntry) -> Result<Result<(), (String, String)>, NeonError> {
    let mut file = File::open(path).map_err(io_err(path))?;
    let mut md5 = Md5::new();
    let mut crc = crc32fast::Hasher::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut len = 0u64;
    loop {
        let k = file.read(&mut buf).map_err(io_err(path))?;
        if k == 0 {
            break;
        }
        md5.update(&buf[..k]);
        crc.update(&buf[..k]);
        len += k as u64;
    }
    if let Some(size) = entry.size {
        if size != len {
            return Ok(Err((format!("{size} bytes"), format!("{len} bytes"))));
        }
    }
    let actual = match &entry.checksum {
        None => return Ok(Ok(())),
        Some(Checksum::Md5(_)) => md5
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect::<String>(),
        Some(Checksum::Crc32(_)) => format!("{:08x}", crc.finalize()),
    };
    let expected = entry.checksum.as_ref().expect("checked above").hex();
    if expected.trim_start_matches("0x") == actual {
        Ok(Ok(()))
    } else {
        Ok(Err((expected.to_string(), actual)))
    }
}

/// How one variable is read from a NEON table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableMapping {
    /// Substring identifying the table's files.
    pub table: &'static str,
    pub schema: SeriesSchema,
}

fn mapping(table: &'static str, variable: &str, value: &str, qc: &str) -> TableMapping {
    TableMapping {
        table,
        schema: SeriesSchema {
            variable: variable.to_string(),
            unit: crate::ingest::unit_for(variable).to_string(),
            timestamp_column: "startDateTime".to_string(),
            value_column: value.to_string(),
            qc_column: Some(qc.to_string()),
        },
    }
}

/// Variables extracted from each supported product.
pub fn table_mappings(product_id: &str) -> Vec<TableMapping> {
    match product_id {
        NITRATE_PRODUCT => vec![mapping("NSW_15_minute", "nitrate", "surfWaterNitrateMean", "finalQF")],
        ELEVATION_PRODUCT => vec![mapping("EOS_5_min", "elevation", "surfacewaterElevMean", "sWatElevFinalQF")],
        TEMPERATURE_PRODUCT => vec![mapping("TSW_5min", "temp", "surfWaterTempMean", "finalQF")],
        WATER_QUALITY_PRODUCT => vec![
            mapping("waq_instantaneous", "cond", "specificConductance", "specificCondFinalQF"),
            mapping("waq_instantaneous", "do", "dissolvedOxygen", "dissolvedOxygenFinalQF"),
            mapping("waq_instantaneous", "turbidity", "turbidity", "turbidityFinalQF"),
        ],
        _ => Vec::new(),
    }
}

/// Merges the downloaded tables of `product_id` into one canonical CSV per
/// variable in `out_dir`.
///
/// Files are taken in name order; when several files (months or sensor
/// positions) report the same instant the first one wins.
pub fn extract(product_id: &str, files: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>, NeonError> {
    let mappings = table_mappings(product_id);
    if mappings.is_empty() {
        return Err(NeonError::InvalidRequest(format!("no extraction rule for product {product_id}")));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut sorted: Vec<&PathBuf> = files.iter().collect();
    sorted.sort_by_key(|p| p.file_name().map(|n| n.to_os_string()));
    let mut out = Vec::with_capacity(mappings.len());
    for m in &mappings {
        let matching: Vec<&&PathBuf> = sorted
            .iter()
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.contains(m.table) && n.ends_with(".csv"))
            })
            .collect();
        if matching.is_empty() {
            return Err(NeonError::MissingTable {
                table: m.table.to_string(),
            });
        }
        let mut rows: Vec<(chrono::DateTime<chrono::Utc>, f64, bool)> = Vec::new();
        for path in matching {
            let (s, report) = match load_series(path, &m.schema) {
                Ok(v) => v,
                Err(IngestError::EmptyInput { .. }) => continue,
                Err(e) => return Err(e.into()),
            };
            debug!(file = %path.display(), ?report, "extracted");
            rows.extend((0..s.len()).map(|i| (s.timestamps[i], s.values[i], s.flagged(i))));
        }
        rows.sort_by_key(|r| r.0);
        rows.dedup_by_key(|r| r.0);
        let series = SensorSeries::new(
            m.schema.variable.clone(),
            m.schema.unit.clone(),
            rows.iter().map(|r| r.0).collect(),
            rows.iter().map(|r| r.1).collect(),
            Some(rows.iter().map(|r| r.2).collect()),
        )?;
        let path = out_dir.join(format!("{}.csv", m.schema.variable));
        write_series(&path, &series)?;
        out.push(path);
    }
    Ok(out)
}
