//! The JSON run report.
//!
//! Every field is a plain copy of a library result, so each number can be
//! reproduced by calling the corresponding operation directly. Struct field
//! order fixes the key order of the output.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arma::{ArmaFit, OrderCell};
use crate::basis::{SmoothEvaluator, VifScreen};
use crate::gam::{curve_points, GamFit, SmoothPoint, StepRecord};
use crate::gamm::{GammModel, ImportanceReport};
use crate::ingest::{unit_for, AlignedFrame, ColumnSummary, Gap};

pub const REPORT_VERSION: u32 = 1;

/// The JSON schema every report validates against.
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report: {0}")]
    Json(#[from] serde_json::Error),
    #[error("report: term `{0}` not found")]
    UnknownTerm(String),
    #[error("report: term `{term}` is inconsistent: {message}")]
    Inconsistent { term: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub site: String,
    /// Hours from UTC to site-local time, used only for labelling.
    pub utc_offset_hours: i32,
    pub seed: u64,
    pub data: DataSection,
    pub summary: Vec<ColumnSummary>,
    pub vif: Option<VifScreen>,
    pub gam: GamSection,
    pub arma: ArmaSection,
    pub aaic: Vec<AaicRow>,
    pub deviance: DevianceSection,
    pub importance: Option<ImportanceReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub response: String,
    pub grid_rows: usize,
    pub valid_rows: usize,
    pub first: String,
    pub last: String,
    pub gaps: Vec<Gap>,
    pub candidates: Vec<String>,
}

impl DataSection {
    pub fn of(frame: &AlignedFrame, candidates: &[String]) -> Self {
        let fmt = |t: Option<&chrono::DateTime<chrono::Utc>>| {
            t.map(|t| t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
                .unwrap_or_default()
        };
        Self {
            response: frame.response_name.clone(),
            grid_rows: frame.len(),
            valid_rows: frame.n_valid(),
            first: fmt(frame.grid.first()),
            last: fmt(frame.grid.last()),
            gaps: frame.gaps.clone(),
            candidates: candidates.to_vec(),
        }
    }
}

/// One smooth term with everything needed to redraw it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub covariate: String,
    pub unit: String,
    pub basis_dim: usize,
    pub lambda: f64,
    pub log_lambda: f64,
    pub edf: f64,
    pub evaluator: SmoothEvaluator,
    pub coefficients: Vec<f64>,
    /// Row-major covariance block of `coefficients`.
    pub covariance: Vec<Vec<f64>>,
}

impl TermReport {
    /// Estimate and standard error at each `x`.
    pub fn curve(&self, xs: &[f64]) -> Result<Vec<SmoothPoint>, ReportError> {
        let p = self.coefficients.len();
        let bad = |m: &str| ReportError::Inconsistent {
            term: self.covariate.clone(),
            message: m.to_string(),
        };
        if self.evaluator.n_coefs() != p {
            return Err(bad("evaluator and coefficients differ in length"));
        }
        if self.covariance.len() != p || self.covariance.iter().any(|r| r.len() != p) {
            return Err(bad("covariance block has the wrong shape"));
        }
        let rows = self
            .evaluator
            .rows(xs, true)
            .map_err(|e| bad(&e.to_string()))?;
        let coefs = nalgebra::DVector::from_column_slice(&self.coefficients);
        let cov = nalgebra::DMatrix::from_fn(p, p, |i, j| self.covariance[i][j]);
        Ok(curve_points(xs, &rows, &coefs, &cov))
    }

    /// `n` evenly spaced points over the observed covariate range.
    pub fn grid(&self, n: usize) -> Vec<f64> {
        let (lo, hi) = self.evaluator.range;
        (0..n)
            .map(|i| {
                if i + 1 == n {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GamSection {
    pub intercept: f64,
    pub intercept_se: f64,
    pub n: usize,
    pub rss: f64,
    pub tss: f64,
    pub deviance_explained: f64,
    pub total_edf: f64,
    pub sigma2: f64,
    pub aic: f64,
    pub gcv: f64,
    pub converged: bool,
    pub stepwise_path: Vec<StepRecord>,
    pub terms: Vec<TermReport>,
}

impl GamSection {
    pub fn of(fit: &GamFit, path: &[StepRecord]) -> Self {
        let terms = fit
            .terms
            .iter()
            .enumerate()
            .map(|(idx, t)| {
                let cov = fit.term_covariance(idx);
                TermReport {
                    covariate: t.covariate().to_string(),
                    unit: unit_for(t.covariate()).to_string(),
                    basis_dim: t.coefficients.len() + 1,
                    lambda: t.lambda,
                    log_lambda: t.log_lambda,
                    edf: t.edf,
                    evaluator: t.basis.evaluator.clone(),
                    coefficients: t.coefficients.iter().copied().collect(),
                    covariance: cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
                }
            })
            .collect();
        Self {
            intercept: fit.intercept,
            intercept_se: fit.coef_covariance[(0, 0)].max(0.0).sqrt(),
            n: fit.n,
            rss: fit.rss,
            tss: fit.tss,
            deviance_explained: fit.deviance_explained,
            total_edf: fit.total_edf,
            sigma2: fit.sigma2_hat,
            aic: fit.aic,
            gcv: fit.gcv,
            converged: fit.converged(),
            stepwise_path: path.to_vec(),
            terms,
        }
    }

    pub fn term(&self, covariate: &str) -> Option<&TermReport> {
        self.terms.iter().find(|t| t.covariate == covariate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmaSection {
    pub fit: ArmaFit,
    pub order_grid: Vec<OrderCell>,
}

/// One row of the GAM versus GAMM comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AaicRow {
    pub model: String,
    pub n: usize,
    pub k: f64,
    pub sigma2: f64,
    pub aaic: f64,
    pub deviance_explained: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevianceSection {
    pub de_gam: f64,
    pub de_arma: f64,
    pub de_total: f64,
}

/// Inputs that are not part of the fitted model.
#[derive(Debug, Clone, Default)]
pub struct RunInfo {
    pub site: String,
    pub utc_offset_hours: i32,
    pub seed: u64,
    pub candidates: Vec<String>,
    pub summary: Vec<ColumnSummary>,
    pub vif: Option<VifScreen>,
}

pub fn build_report(
    info: RunInfo,
    frame: &AlignedFrame,
    model: &GammModel,
    importance: Option<ImportanceReport>,
) -> Report {
    Report {
        version: REPORT_VERSION,
        site: info.site,
        utc_offset_hours: info.utc_offset_hours,
        seed: info.seed,
        data: DataSection::of(frame, &info.candidates),
        summary: info.summary,
        vif: info.vif,
        gam: GamSection::of(&model.gam, &model.stepwise_path),
        arma: ArmaSection {
            fit: model.arma.clone(),
            order_grid: model.order_cells.clone(),
        },
        aaic: vec![
            AaicRow {
                model: "GAM".into(),
                n: model.n,
                k: model.k_gam,
                sigma2: model.gam.sigma2_hat,
                aaic: model.aaic_gam,
                deviance_explained: model.de_gam,
            },
            AaicRow {
                model: "GAMM".into(),
                n: model.n,
                k: model.k_gamm,
                sigma2: model.arma.sigma2,
                aaic: model.aaic_gamm,
                deviance_explained: model.de_total,
            },
        ],
        deviance: DevianceSection {
            de_gam: model.de_gam,
            de_arma: model.de_arma,
            de_total: model.de_total,
        },
        importance,
    }
}

/// Pretty-printed JSON with a trailing newline.
pub fn to_json(report: &Report) -> Result<String, ReportError> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn from_json(text: &str) -> Result<Report, ReportError> {
    Ok(serde_json::from_str(text)?)
}
