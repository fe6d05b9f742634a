//! End-to-end run: ingest, summary, VIF screening, the two-step fit,
//! variable importance, the JSON report and the figures.
//!
//! Configuration is TOML with the sections `[site]`, `[input]`, `[model]`,
//! `[arma]` and `[output]`. Any key can be overridden from the environment
//! as `GAMM__<SECTION>__<KEY>=<value>`, where the value is read as a TOML
//! value and falls back to a plain string.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::info;

use crate::arma::{ArmaOptions, GapMode};
use crate::basis::{vif_screen, SmoothSpec, VifScreen, DEFAULT_BASIS_DIM};
use crate::gamm::{fit_gamm, variable_importance, GammError, GammModel, GammOptions, ImportanceReport};
use crate::ingest::{
    align, load_series, summarize, unit_for, AlignedFrame, IngestError, SeriesSchema, DEFAULT_TOLERANCE_SECS,
    LOG_TURBIDITY,
};
use crate::plot::{plot_report, write_diel};
use crate::report::{build_report, to_json, Report, RunInfo};

pub const ENV_PREFIX: &str = "GAMM__";
pub const DEFAULT_VIF_THRESHOLD: f64 = 6.0;
/// Sensor variables read from `input.dir` when `input.files` is not given.
pub const DEFAULT_VARIABLES: [&str; 5] = ["cond", "do", "temp", "turbidity", "elevation"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub site: SiteConfig,
    pub input: InputConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub arma: ArmaConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SiteConfig {
    pub name: String,
    pub utc_offset_hours: i32,
}

impl Default for SiteConfig {
    fn default() -> Self {
        Self {
            name: "site".into(),
            utc_offset_hours: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    /// Directory holding `<variable>.csv` in the canonical layout.
    pub dir: Option<PathBuf>,
    /// Explicit `variable → path`; must include `nitrate`.
    #[serde(default)]
    pub files: BTreeMap<String, PathBuf>,
    #[serde(default = "default_tolerance")]
    pub tolerance_secs: i64,
}

fn default_tolerance() -> i64 {
    DEFAULT_TOLERANCE_SECS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Candidate covariates; empty means every column of the aligned frame.
    pub candidates: Vec<String>,
    pub basis_dim: usize,
    /// Per-covariate overrides of `basis_dim`.
    pub basis_dims: BTreeMap<String, usize>,
    pub vif_threshold: f64,
    pub min_rows: usize,
    pub seed: u64,
    pub importance: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            candidates: Vec::new(),
            basis_dim: DEFAULT_BASIS_DIM,
            basis_dims: BTreeMap::new(),
            vif_threshold: DEFAULT_VIF_THRESHOLD,
            min_rows: crate::gamm::DEFAULT_MIN_ROWS,
            seed: 0,
            importance: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmaConfig {
    pub p_max: usize,
    pub q_max: usize,
    pub gap_mode: GapMode,
    pub max_restarts: usize,
}

impl Default for ArmaConfig {
    fn default() -> Self {
        let g = GammOptions::default();
        Self {
            p_max: g.p_max,
            q_max: g.q_max,
            gap_mode: g.arma.gap_mode,
            max_restarts: g.arma.max_restarts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Start of the diel window; defaults to the first grid instant.
    pub diel_start: Option<DateTime<Utc>>,
}

/// Failure classes with their process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureKind {
    Io,
    Data,
    Fit,
}

impl FailureKind {
    pub fn exit_code(self) -> i32 {
        match self {
            FailureKind::Io => 1,
            FailureKind::Data => 2,
            FailureKind::Fit => 3,
        }
    }
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub kind: FailureKind,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: &'static str, kind: FailureKind, message: impl Into<String>) -> Self {
        Self {
            stage,
            kind,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    fn ingest(e: IngestError) -> Self {
        let kind = match e {
            IngestError::Io { .. } => FailureKind::Io,
            _ => FailureKind::Data,
        };
        Self::new("ingest", kind, e.to_string())
    }

    fn fit(e: GammError) -> Self {
        let kind = match e {
            GammError::TooFewRows { .. } | GammError::TooFewCovariates(_) => FailureKind::Data,
            _ => FailureKind::Fit,
        };
        Self::new("fit", kind, e.to_string())
    }
}

fn config_err(message: impl Into<String>) -> PipelineError {
    PipelineError::new("config", FailureKind::Data, message)
}

/// Parses an override value as TOML, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Parses `text`, applies overrides from `env` and resolves relative
    /// paths against `base_dir`.
    pub fn parse(
        text: &str,
        base_dir: &Path,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, PipelineError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        overrides.sort();
        for (key, raw) in overrides {
            let rest = &key[ENV_PREFIX.len()..];
            let Some((section, field)) = rest.split_once("__") else {
                return Err(config_err(format!("override {key} must look like {ENV_PREFIX}SECTION__KEY")));
            };
            let section = section.to_ascii_lowercase();
            let field = field.to_ascii_lowercase();
            let entry = table
                .entry(section.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let Some(sub) = entry.as_table_mut() else {
                return Err(config_err(format!("override {key}: `{section}` is not a section")));
            };
            sub.insert(field, override_value(&raw));
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        if let Some(d) = cfg.input.dir.as_mut() {
            resolve(d);
        }
        cfg.input.files.values_mut().for_each(resolve);
        resolve(&mut cfg.output.dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::new("config", FailureKind::Io, format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, env)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.input.dir.is_none() && self.input.files.is_empty() {
            return Err(config_err("input needs `dir` or `files`"));
        }
        if !self.input.files.is_empty() && !self.input.files.contains_key("nitrate") {
            return Err(config_err("input.files must include `nitrate`"));
        }
        if self.input.tolerance_secs < 0 {
            return Err(config_err("input.tolerance_secs must be non-negative"));
        }
        if !(self.model.vif_threshold > 0.0) {
            return Err(config_err("model.vif_threshold must be positive"));
        }
        let dims = std::iter::once(&self.model.basis_dim).chain(self.model.basis_dims.values());
        for &k in dims {
            if k < 3 {
                return Err(config_err(format!("basis dimension {k} is below 3")));
            }
        }
        if self.model.min_rows == 0 {
            return Err(config_err("model.min_rows must be positive"));
        }
        if self.arma.p_max.max(self.arma.q_max + 1) > 8 {
            return Err(config_err("arma.p_max and arma.q_max must satisfy max(p, q + 1) ≤ 8"));
        }
        Ok(())
    }

    pub fn gamm_options(&self) -> GammOptions {
        GammOptions {
            min_rows: self.model.min_rows,
            p_max: self.arma.p_max,
            q_max: self.arma.q_max,
            arma: ArmaOptions {
                gap_mode: self.arma.gap_mode,
                seed: self.model.seed,
                max_restarts: self.arma.max_restarts,
            },
        }
    }

    pub fn spec_for(&self, covariate: &str) -> SmoothSpec {
        let k = self
            .model
            .basis_dims
            .get(covariate)
            .copied()
            .unwrap_or(self.model.basis_dim);
        SmoothSpec::new(covariate).with_basis_dim(k)
    }

    /// `(variable, path)` pairs, nitrate first.
    pub fn input_files(&self) -> Vec<(String, PathBuf)> {
        let mut out: Vec<(String, PathBuf)> = if self.input.files.is_empty() {
            let dir = self.input.dir.as_ref().expect("validated");
            std::iter::once("nitrate")
                .chain(DEFAULT_VARIABLES)
                .map(|v| (v.to_string(), dir.join(format!("{v}.csv"))))
                .collect()
        } else {
            self.input.files.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
        };
        out.sort_by_key(|(v, _)| (v != "nitrate", v.clone()));
        out
    }
}

/// Loads and aligns the configured inputs.
pub fn ingest(cfg: &RunConfig) -> Result<AlignedFrame, PipelineError> {
    let mut series = Vec::new();
    for (variable, path) in cfg.input_files() {
        let schema = SeriesSchema::canonical(variable.as_str(), unit_for(&variable));
        let (s, report) = load_series(&path, &schema).map_err(PipelineError::ingest)?;
        info!(variable, rows = report.rows_kept, dropped = report.unparseable, "loaded");
        series.push(s);
    }
    let nitrate = series.remove(0);
    align(&nitrate, &series, cfg.input.tolerance_secs).map_err(PipelineError::ingest)
}

/// Candidate covariates in configuration order, or the frame's own order.
pub fn candidates(cfg: &RunConfig, frame: &AlignedFrame) -> Result<Vec<String>, PipelineError> {
    if cfg.model.candidates.is_empty() {
        return Ok(frame.covariate_names());
    }
    for c in &cfg.model.candidates {
        if frame.covariate(c).is_none() {
            let hint = if c == "turbidity" {
                format!(" (turbidity is modelled as {LOG_TURBIDITY})")
            } else {
                String::new()
            };
            return Err(config_err(format!("candidate `{c}` is not in the aligned data{hint}")));
        }
    }
    Ok(cfg.model.candidates.clone())
}

/// Iterative VIF screening on the valid rows; `None` with fewer than two
/// candidates.
pub fn screen(frame: &AlignedFrame, names: &[String], threshold: f64) -> Result<Option<VifScreen>, PipelineError> {
    if names.len() < 2 {
        return Ok(None);
    }
    let cols: Vec<(String, Vec<f64>)> = names
        .iter()
        .map(|n| (n.clone(), frame.valid_column(n).expect("candidate checked")))
        .collect();
    vif_screen(&cols, threshold)
        .map(Some)
        .map_err(|e| PipelineError::new("vif", FailureKind::Data, e.to_string()))
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub frame: AlignedFrame,
    pub model: GammModel,
    pub importance: Option<ImportanceReport>,
    pub report: Report,
    pub files: Vec<PathBuf>,
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(|e| PipelineError::new("report", FailureKind::Io, format!("{}: {e}", path.display())))
}

pub fn run(cfg: &RunConfig) -> Result<PipelineOutput, PipelineError> {
    let frame = ingest(cfg)?;
    info!(rows = frame.len(), valid = frame.n_valid(), "aligned");
    let summary = summarize(&frame).map_err(|e| PipelineError::new("summarize", FailureKind::Data, e.to_string()))?;
    let names = candidates(cfg, &frame)?;
    let vif = screen(&frame, &names, cfg.model.vif_threshold)?;
    let retained = vif.as_ref().map_or(names.clone(), |v| v.retained.clone());
    if let Some(v) = &vif {
        info!(excluded = ?v.excluded, "vif screening");
    }
    let specs: Vec<SmoothSpec> = retained.iter().map(|c| cfg.spec_for(c)).collect();
    let opts = cfg.gamm_options();
    let model = fit_gamm(&frame, &specs, &opts).map_err(PipelineError::fit)?;
    if !model.converged() {
        return Err(PipelineError::new(
            "fit",
            FailureKind::Fit,
            format!(
                "did not converge (smoothing search {}, ARMA({},{}) optimizer {})",
                if model.gam.converged() { "converged" } else { "stalled" },
                model.arma.p,
                model.arma.q,
                if model.arma.converged { "converged" } else { "stalled" }
            ),
        ));
    }
    let importance = if cfg.model.importance && model.gam.terms.len() >= 2 {
        Some(variable_importance(&model, &frame, &opts).map_err(|e| {
            let mut err = PipelineError::fit(e);
            err.stage = "importance";
            err
        })?)
    } else {
        None
    };
    let info = RunInfo {
        site: cfg.site.name.clone(),
        utc_offset_hours: cfg.site.utc_offset_hours,
        seed: cfg.model.seed,
        candidates: names,
        summary,
        vif,
    };
    let report = build_report(info, &frame, &model, importance.clone());
    let out = &cfg.output.dir;
    fs::create_dir_all(out)
        .map_err(|e| PipelineError::new("report", FailureKind::Io, format!("{}: {e}", out.display())))?;
    let json = to_json(&report).map_err(|e| PipelineError::new("report", FailureKind::Io, e.to_string()))?;
    let report_path = out.join("report.json");
    write_text(&report_path, &json)?;
    let mut files = vec![report_path];
    let plot_err = |e: crate::plot::PlotError| {
        let kind = match e {
            crate::plot::PlotError::Io { .. } => FailureKind::Io,
            _ => FailureKind::Data,
        };
        PipelineError::new("plot", kind, e.to_string())
    };
    files.extend(plot_report(&report, out).map_err(plot_err)?);
    let start = cfg.output.diel_start.unwrap_or(frame.grid[0]);
    files.push(write_diel(&frame, start, cfg.site.utc_offset_hours, out).map_err(plot_err)?);
    Ok(PipelineOutput {
        frame,
        model,
        importance,
        report,
        files,
    })
}
