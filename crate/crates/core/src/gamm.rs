//! The two-step model: an additive model for the mean, then an ARMA model
//! for its residuals.
//!
//! Deviance is partitioned through the innovation variance. With
//! `TSS = Σ (y − ȳ)²`, the additive part explains `1 − RSS/TSS` and the
//! full model explains `1 − n σ̂²_innov / TSS`, where `σ̂²_innov` is the
//! one-step-ahead prediction variance of the ARMA fit on the residuals.
//! The two coincide when the selected order is (0, 0).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::info;

use crate::arma::{fit_arma, select_order, ArmaError, ArmaFit, ArmaOptions, OrderCell};
use crate::basis::SmoothSpec;
use crate::gam::{select_lambdas, stepwise_select, GamData, GamError, GamFit, StepRecord};
use crate::ingest::AlignedFrame;

/// Default floor on the number of valid rows.
pub const DEFAULT_MIN_ROWS: usize = 500;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AicError {
    #[error("aic: variance {0} is not positive")]
    NonPositiveVariance(f64),
    #[error("aic: need n ≥ 1 and k ≥ 0 (n = {n}, k = {k})")]
    BadCounts { n: usize, k: f64 },
}

/// `n ln σ̂² + 2k`.
pub fn aaic(n: usize, sigma2: f64, k: f64) -> Result<f64, AicError> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(AicError::NonPositiveVariance(sigma2));
    }
    if n == 0 || !(k >= 0.0) {
        return Err(AicError::BadCounts { n, k });
    }
    Ok(n as f64 * sigma2.ln() + 2.0 * k)
}

#[derive(Debug, Error)]
pub enum GammError {
    #[error("gamm: {got} valid rows is below the floor of {min}")]
    TooFewRows { got: usize, min: usize },
    #[error("gamm: variable importance needs at least two covariates, the model has {0}")]
    TooFewCovariates(usize),
    #[error("gamm: {0}")]
    Gam(#[from] GamError),
    #[error("gamm: {0}")]
    Arma(#[from] ArmaError),
    #[error("gamm: {0}")]
    Aic(#[from] AicError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammOptions {
    pub min_rows: usize,
    pub p_max: usize,
    pub q_max: usize,
    pub arma: ArmaOptions,
}

impl Default for GammOptions {
    fn default() -> Self {
        Self {
            min_rows: DEFAULT_MIN_ROWS,
            p_max: 5,
            q_max: 5,
            arma: ArmaOptions::default(),
        }
    }
}

/// A fitted two-step model.
#[derive(Debug, Clone)]
pub struct GammModel {
    pub gam: GamFit,
    pub arma: ArmaFit,
    pub stepwise_path: Vec<StepRecord>,
    pub order_cells: Vec<OrderCell>,
    pub de_gam: f64,
    pub de_total: f64,
    pub de_arma: f64,
    pub aaic_gam: f64,
    pub aaic_gamm: f64,
    pub n: usize,
    pub k_gam: f64,
    pub k_gamm: f64,
}

impl GammModel {
    pub fn covariates(&self) -> Vec<String> {
        self.gam.covariates()
    }

    pub fn converged(&self) -> bool {
        self.gam.converged() && self.arma.converged
    }
}

/// Deviance explained by the full model given the residual ARMA fit.
fn de_total(tss: f64, n: usize, arma: &ArmaFit) -> f64 {
    if tss > 0.0 {
        (1.0 - n as f64 * arma.sigma2 / tss).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

fn compose(
    gam: GamFit,
    arma: ArmaFit,
    stepwise_path: Vec<StepRecord>,
    order_cells: Vec<OrderCell>,
) -> Result<GammModel, GammError> {
    let n = gam.n;
    let de_gam = gam.deviance_explained;
    let de_total = de_total(gam.tss, n, &arma);
    let k_gam = gam.total_edf;
    let k_gamm = k_gam + (arma.p + arma.q + 1) as f64;
    let aaic_gam = gam.aic;
    let aaic_gamm = aaic(n, arma.sigma2, k_gamm)?;
    Ok(GammModel {
        de_arma: de_total - de_gam,
        gam,
        arma,
        stepwise_path,
        order_cells,
        de_gam,
        de_total,
        aaic_gam,
        aaic_gamm,
        n,
        k_gam,
        k_gamm,
    })
}

fn check_rows(frame: &AlignedFrame, min: usize) -> Result<(), GammError> {
    let got = frame.n_valid();
    if got < min {
        return Err(GammError::TooFewRows { got, min });
    }
    Ok(())
}

/// Residual lattice of `gam` on the frame's 15-minute grid.
pub fn residual_series(frame: &AlignedFrame, gam: &GamFit) -> Vec<Option<f64>> {
    frame.to_lattice(&gam.residuals)
}

/// Stepwise covariate selection, then ARMA order selection on the
/// residuals.
pub fn fit_gamm(frame: &AlignedFrame, candidates: &[SmoothSpec], opts: &GammOptions) -> Result<GammModel, GammError> {
    check_rows(frame, opts.min_rows)?;
    let data = GamData::from_frame(frame, candidates)?;
    let names: Vec<String> = candidates.iter().map(|c| c.covariate.clone()).collect();
    let step = stepwise_select(&data, &names)?;
    info!(covariates = ?step.fit.covariates(), aic = step.fit.aic, "additive step done");
    let series = residual_series(frame, &step.fit);
    let sel = select_order(&series, opts.p_max, opts.q_max, &opts.arma)?;
    info!(p = sel.best.p, q = sel.best.q, "error model selected");
    compose(step.fit, sel.best, step.path, sel.cells)
}

/// Like [`fit_gamm`] but with the covariate set fixed to `terms`.
pub fn fit_gamm_fixed(frame: &AlignedFrame, terms: &[SmoothSpec], opts: &GammOptions) -> Result<GammModel, GammError> {
    check_rows(frame, opts.min_rows)?;
    let data = GamData::from_frame(frame, terms)?;
    let names: Vec<String> = terms.iter().map(|c| c.covariate.clone()).collect();
    let gam = select_lambdas(&data, &names)?;
    let series = residual_series(frame, &gam);
    let sel = select_order(&series, opts.p_max, opts.q_max, &opts.arma)?;
    compose(gam, sel.best, Vec::new(), sel.cells)
}

/// Importance of one covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub covariate: String,
    /// Percentage points of total deviance lost when the covariate is
    /// removed; `None` if the reduced model could not be fitted.
    pub importance: Option<f64>,
    pub de_total_without: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    /// In the model's term order.
    pub entries: Vec<ImportanceEntry>,
    /// `100 · de_arma` of the full model.
    pub arma_share: f64,
    pub de_total: f64,
    /// Covariates by decreasing importance; ties by name. Failed refits
    /// are listed last.
    pub ranking: Vec<String>,
}

impl ImportanceReport {
    pub fn importance(&self, covariate: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.covariate == covariate)
            .and_then(|e| e.importance)
    }
}

/// Drops each covariate in turn, re-selects the remaining smoothing
/// parameters, refits the ARMA coefficients at the model's order and
/// reports the loss of total deviance explained.
pub fn variable_importance(model: &GammModel, frame: &AlignedFrame, opts: &GammOptions) -> Result<ImportanceReport, GammError> {
    let covariates = model.covariates();
    if covariates.len() < 2 {
        return Err(GammError::TooFewCovariates(covariates.len()));
    }
    let specs: Vec<SmoothSpec> = model
        .gam
        .terms
        .iter()
        .map(|t| SmoothSpec::new(t.covariate()).with_basis_dim(t.coefficients.len() + 1))
        .collect();
    let data = GamData::from_frame(frame, &specs)?;
    let (p, q) = model.arma.order();
    let entries: Vec<ImportanceEntry> = covariates
        .par_iter()
        .map(|c| {
            let rest: Vec<String> = covariates.iter().filter(|x| *x != c).cloned().collect();
            let refit = select_lambdas(&data, &rest)
                .map_err(GammError::from)
                .and_then(|gam| {
                    let series = residual_series(frame, &gam);
                    let arma = fit_arma(&series, p, q, &opts.arma)?;
                    Ok(de_total(gam.tss, gam.n, &arma))
                });
            match refit {
                Ok(de) => ImportanceEntry {
                    covariate: c.clone(),
                    importance: Some(100.0 * (model.de_total - de)),
                    de_total_without: Some(de),
                    error: None,
                },
                Err(e) => ImportanceEntry {
                    covariate: c.clone(),
                    importance: None,
                    de_total_without: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let mut ranking: Vec<&ImportanceEntry> = entries.iter().collect();
    ranking.sort_by(|a, b| match (a.importance, b.importance) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.covariate.cmp(&b.covariate)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.covariate.cmp(&b.covariate),
    });
    let ranking = ranking.into_iter().map(|e| e.covariate.clone()).collect();
    Ok(ImportanceReport {
        entries,
        arma_share: 100.0 * model.de_arma,
        de_total: model.de_total,
        ranking,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aaic_examples() {
        assert_eq!(aaic(100, 1.0, 5.0).unwrap(), 10.0);
        assert!((aaic(200, std::f64::consts::E, 3.0).unwrap() - 206.0).abs() < 1e-12);
        assert!(aaic(10, 0.0, 1.0).is_err());
        assert!(aaic(10, -1.0, 1.0).is_err());
        assert!(aaic(0, 1.0, 1.0).is_err());
    }

    #[test]
    fn aaic_is_additive_in_k() {
        for (n, s, k) in [(10, 0.3, 0.0), (70_080, 2.5, 17.25), (1, 1e-9, 3.5)] {
            let d = aaic(n, s, k + 1.0).unwrap() - aaic(n, s, k).unwrap();
            assert!((d - 2.0).abs() < 1e-9 * (1.0 + aaic(n, s, k).unwrap().abs()));
        }
    }
}
