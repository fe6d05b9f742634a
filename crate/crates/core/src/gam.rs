//! Gaussian additive models with thin-plate smooths.
//!
//! Fitting minimizes `‖y − β₀ − Σ X_k β_k‖² + Σ λ_k β_kᵀ S_k β_k`. The
//! design is reduced once to its QR factor so every smoothing-parameter
//! trial costs `O(p³)` regardless of the number of rows. Smoothing
//! parameters are chosen by GCV; covariate sets are compared by AIC.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::basis::{tprs_basis, BasisError, BasisExpansion, SmoothSpec};
use crate::gamm::aaic;
use crate::ingest::AlignedFrame;

/// Search box for the log smoothing parameters (relative to each term's
/// reference scale).
pub const LOG_LAMBDA_RANGE: (f64, f64) = (-12.0, 12.0);
const GRID_POINTS: usize = 21;
const MAX_SWEEPS: usize = 50;
const SWEEP_REL_TOL: f64 = 1e-7;
const GOLDEN_ITERS: usize = 48;
/// RSS values below this fraction of the total sum of squares are
/// indistinguishable from zero in double precision.
const RSS_FLOOR_REL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GamError {
    #[error("gam: {0}")]
    Basis(#[from] BasisError),
    #[error("gam: penalized system is singular")]
    Singular,
    #[error("gam: response contains non-finite values")]
    NonFiniteResponse,
    #[error("gam: {got} rows is too few for {columns} model columns (need {needed})")]
    TooFewRows {
        got: usize,
        columns: usize,
        needed: usize,
    },
    #[error("gam: unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error("gam: expected {expected} smoothing parameters, got {got}")]
    LambdaCount { expected: usize, got: usize },
    #[error("gam: smoothing parameter {0} is negative or not finite")]
    BadLambda(f64),
}

/// Response and the candidate bases, built once and shared by every fit.
#[derive(Debug, Clone)]
pub struct GamData {
    pub y: DVector<f64>,
    pub tss: f64,
    bases: BTreeMap<String, Arc<BasisExpansion>>,
    specs: BTreeMap<String, SmoothSpec>,
}

impl GamData {
    /// Builds bases for `specs` from the frame's valid rows.
    pub fn from_frame(frame: &AlignedFrame, specs: &[SmoothSpec]) -> Result<Self, GamError> {
        let y = frame
            .valid_column(&frame.response_name)
            .expect("response column exists");
        let columns = specs
            .iter()
            .map(|s| {
                frame
                    .valid_column(&s.covariate)
                    .map(|c| (s.clone(), c))
                    .ok_or_else(|| GamError::UnknownCovariate(s.covariate.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_columns(y, columns)
    }

    pub fn from_columns(
        y: Vec<f64>,
        columns: Vec<(SmoothSpec, Vec<f64>)>,
    ) -> Result<Self, GamError> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(GamError::NonFiniteResponse);
        }
        let built: Vec<_> = columns
            .into_par_iter()
            .map(|(spec, x)| tprs_basis(&x, &spec).map(|b| (spec, b)))
            .collect::<Result<_, _>>()?;
        let mut bases = BTreeMap::new();
        let mut specs = BTreeMap::new();
        for (spec, b) in built {
            bases.insert(spec.covariate.clone(), Arc::new(b));
            specs.insert(spec.covariate.clone(), spec);
        }
        let y = DVector::from_vec(y);
        let mean = y.mean();
        let tss = y.iter().map(|v| (v - mean).powi(2)).sum();
        Ok(Self {
            y,
            tss,
            bases,
            specs,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn basis(&self, name: &str) -> Option<&Arc<BasisExpansion>> {
        self.bases.get(name)
    }

    pub fn candidates(&self) -> Vec<String> {
        self.bases.keys().cloned().collect()
    }

    pub fn spec(&self, name: &str) -> Option<&SmoothSpec> {
        self.specs.get(name)
    }

    fn rss_floor(&self) -> f64 {
        (RSS_FLOOR_REL * self.tss).max(f64::MIN_POSITIVE)
    }
}

/// One fitted smooth term.
#[derive(Debug, Clone)]
pub struct GamTerm {
    pub basis: Arc<BasisExpansion>,
    pub coefficients: DVector<f64>,
    pub lambda: f64,
    /// Search coordinate: `lambda = reference_scale · exp(log_lambda)`.
    pub log_lambda: f64,
    pub reference_scale: f64,
    pub edf: f64,
}

impl GamTerm {
    pub fn covariate(&self) -> &str {
        &self.basis.covariate
    }
}

/// Record of the GCV smoothing-parameter search.
#[derive(Debug, Clone, Default)]
pub struct LambdaSearch {
    pub converged: bool,
    pub sweeps: usize,
    /// Every GCV value probed; the selected score is the minimum.
    pub probed: Vec<f64>,
}

/// A fitted additive model.
#[derive(Debug, Clone)]
pub struct GamFit {
    pub intercept: f64,
    pub terms: Vec<GamTerm>,
    pub n: usize,
    pub rss: f64,
    pub tss: f64,
    pub deviance_explained: f64,
    pub total_edf: f64,
    /// `rss / n`.
    pub sigma2_hat: f64,
    pub aic: f64,
    pub gcv: f64,
    /// `σ̂² (XᵀX + Σ λ_k S_k)⁻¹`, intercept first then each term's block.
    pub coef_covariance: DMatrix<f64>,
    /// Residuals on the valid rows, in time order.
    pub residuals: Vec<f64>,
    pub search: Option<LambdaSearch>,
}

impl GamFit {
    pub fn covariates(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.covariate().to_string()).collect()
    }

    pub fn term(&self, name: &str) -> Option<(usize, &GamTerm)> {
        self.terms
            .iter()
            .enumerate()
            .find(|(_, t)| t.covariate() == name)
    }

    /// Column offset of term `idx` inside the coefficient vector.
    pub fn offset(&self, idx: usize) -> usize {
        1 + self.terms[..idx].iter().map(|t| t.coefficients.len()).sum::<usize>()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.lambda).collect()
    }

    pub fn converged(&self) -> bool {
        self.search.as_ref().is_none_or(|s| s.converged)
    }

    /// Covariance block of term `idx`.
    pub fn term_covariance(&self, idx: usize) -> DMatrix<f64> {
        let off = self.offset(idx);
        let len = self.terms[idx].coefficients.len();
        self.coef_covariance.view((off, off), (len, len)).into_owned()
    }
}

/// The QR-reduced problem for one ordered term set.
struct Reduced<'a> {
    data: &'a GamData,
    terms: Vec<Arc<BasisExpansion>>,
    offsets: Vec<usize>,
    p: usize,
    r: DMatrix<f64>,
    gram: DMatrix<f64>,
    qty: DVector<f64>,
    rss0: f64,
    reference: Vec<f64>,
}

struct Solution {
    beta: DVector<f64>,
    rss: f64,
    edf: Vec<f64>,
    total_edf: f64,
    a_inv: DMatrix<f64>,
}

impl<'a> Reduced<'a> {
    fn new(data: &'a GamData, names: &[String]) -> Result<Self, GamError> {
        let terms: Vec<Arc<BasisExpansion>> = names
            .iter()
            .map(|n| {
                data.bases
                    .get(n)
                    .cloned()
                    .ok_or_else(|| GamError::UnknownCovariate(n.clone()))
            })
            .collect::<Result<_, _>>()?;
        let n = data.n();
        let mut offsets = Vec::with_capacity(terms.len());
        let mut p = 1;
        for t in &terms {
            offsets.push(p);
            p += t.n_coefs();
        }
        let needed = p + 5;
        if n < needed {
            return Err(GamError::TooFewRows {
                got: n,
                columns: p,
                needed,
            });
        }
        let mut x = DMatrix::zeros(n, p);
        x.column_mut(0).fill(1.0);
        for (t, &off) in terms.iter().zip(&offsets) {
            x.view_mut((0, off), (n, t.n_coefs())).copy_from(&t.design);
        }
        let qr = x.qr();
        let q = qr.q();
        let r = qr.r();
        let qty = q.tr_mul(&data.y);
        let rss0 = (&data.y - &q * &qty).norm_squared();
        let gram = r.tr_mul(&r);
        let reference = terms
            .iter()
            .zip(&offsets)
            .map(|(t, &off)| {
                let k = t.n_coefs();
                let g = gram.view((off, off), (k, k)).norm();
                let s = t.penalty.norm();
                if s > 0.0 && g > 0.0 {
                    g / s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self {
            data,
            terms,
            offsets,
            p,
            r,
            gram,
            qty,
            rss0,
            reference,
        })
    }

    fn solve(&self, lambdas: &[f64]) -> Result<Solution, GamError> {
        let mut a = self.gram.clone();
        for ((t, &off), &lam) in self.terms.iter().zip(&self.offsets).zip(lambdas) {
            let k = t.n_coefs();
            let mut block = a.view_mut((off, off), (k, k));
            block += &t.penalty * lam;
        }
        let chol = Cholesky::<f64, Dyn>::new(a).ok_or(GamError::Singular)?;
        let l = chol.l_dirty();
        let diag: Vec<f64> = (0..self.p).map(|i| l[(i, i)]).collect();
        let dmax = diag.iter().cloned().fold(0.0, f64::max);
        let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(dmin > 0.0) || (dmin / dmax).powi(2) < 1e-15 {
            return Err(GamError::Singular);
        }
        let rhs = self.r.tr_mul(&self.qty);
        let beta = chol.solve(&rhs);
        let rss = self.rss0 + (&self.qty - &self.r * &beta).norm_squared();
        let a_inv = chol.inverse();
        let influence = &a_inv * &self.gram;
        let edf = self
            .terms
            .iter()
            .zip(&self.offsets)
            .map(|(t, &off)| (off..off + t.n_coefs()).map(|i| influence[(i, i)]).sum())
            .collect::<Vec<f64>>();
        let total_edf = influence[(0, 0)] + edf.iter().sum::<f64>();
        Ok(Solution {
            beta,
            rss,
            edf,
            total_edf,
            a_inv,
        })
    }

    fn gcv(&self, sol: &Solution) -> f64 {
        let n = self.data.n() as f64;
        let rss = sol.rss.max(self.data.rss_floor());
        n * rss / (n - sol.total_edf).powi(2)
    }

    fn lambdas_from_log(&self, rho: &[f64]) -> Vec<f64> {
        rho.iter()
            .zip(&self.reference)
            .map(|(r, s)| s * r.exp())
            .collect()
    }

    fn into_fit(&self, lambdas: &[f64], search: Option<LambdaSearch>) -> Result<GamFit, GamError> {
        let sol = self.solve(lambdas)?;
        let n = self.data.n();
        let mut fitted = DVector::from_element(n, sol.beta[0]);
        let mut terms = Vec::with_capacity(self.terms.len());
        for (i, (t, &off)) in self.terms.iter().zip(&self.offsets).enumerate() {
            let coefs = sol.beta.rows(off, t.n_coefs()).into_owned();
            fitted += &t.design * &coefs;
            terms.push(GamTerm {
                basis: t.clone(),
                coefficients: coefs,
                lambda: lambdas[i],
                log_lambda: (lambdas[i] / self.reference[i]).ln(),
                reference_scale: self.reference[i],
                edf: sol.edf[i],
            });
        }
        let residuals: Vec<f64> = (&self.data.y - &fitted).iter().copied().collect();
        let rss = sol.rss;
        let tss = self.data.tss;
        let deviance_explained = if tss > 0.0 {
            (1.0 - rss / tss).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let sigma2_hat = rss / n as f64;
        let aic = model_aic(self.data, rss, sol.total_edf);
        Ok(GamFit {
            intercept: sol.beta[0],
            terms,
            n,
            rss,
            tss,
            deviance_explained,
            total_edf: sol.total_edf,
            sigma2_hat,
            aic,
            gcv: self.gcv(&sol),
            coef_covariance: &sol.a_inv * sigma2_hat,
            residuals,
            search,
        })
    }
}

fn model_aic(data: &GamData, rss: f64, total_edf: f64) -> f64 {
    let n = data.n();
    let sigma2 = rss.max(data.rss_floor()) / n as f64;
    aaic(n, sigma2, total_edf).expect("floored variance is positive")
}

/// Fits the model with fixed smoothing parameters, one per term in `names`.
pub fn fit_with_lambdas(data: &GamData, names: &[String], lambdas: &[f64]) -> Result<GamFit, GamError> {
    if lambdas.len() != names.len() {
        return Err(GamError::LambdaCount {
            expected: names.len(),
            got: lambdas.len(),
        });
    }
    if let Some(&bad) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(GamError::BadLambda(bad));
    }
    Reduced::new(data, names)?.into_fit(lambdas, None)
}

/// Builds the bases from `frame` and fits with fixed smoothing parameters.
pub fn fit_penalized(frame: &AlignedFrame, terms: &[SmoothSpec], lambdas: &[f64]) -> Result<GamFit, GamError> {
    let data = GamData::from_frame(frame, terms)?;
    let names: Vec<String> = terms.iter().map(|t| t.covariate.clone()).collect();
    fit_with_lambdas(&data, &names, lambdas)
}

struct Search<'r, 'a> {
    reduced: &'r Reduced<'a>,
    best_rho: Vec<f64>,
    best: f64,
    probed: Vec<f64>,
}

impl Search<'_, '_> {
    fn score(&mut self, rho: &[f64]) -> f64 {
        let lambdas = self.reduced.lambdas_from_log(rho);
        let s = match self.reduced.solve(&lambdas) {
            Ok(sol) => self.reduced.gcv(&sol),
            Err(_) => f64::INFINITY,
        };
        self.probed.push(s);
        if s < self.best {
            self.best = s;
            self.best_rho = rho.to_vec();
        }
        s
    }

    fn coordinate(&mut self, j: usize) {
        let (lo, hi) = LOG_LAMBDA_RANGE;
        let step = (hi - lo) / (GRID_POINTS - 1) as f64;
        // Largest λ first so exact ties resolve toward the smoother model.
        let mut grid_best = (self.best, self.best_rho[j]);
        for g in 0..GRID_POINTS {
            let mut rho = self.best_rho.clone();
            rho[j] = hi - step * g as f64;
            let s = self.score(&rho);
            if s < grid_best.0 {
                grid_best = (s, rho[j]);
            }
        }
        let centre = grid_best.1;
        let (mut a, mut b) = ((centre - step).max(lo), (centre + step).min(hi));
        let ratio = (5f64.sqrt() - 1.0) / 2.0;
        let base = self.best_rho.clone();
        let eval = |s: &mut Self, v: f64| {
            let mut rho = base.clone();
            rho[j] = v;
            s.score(&rho)
        };
        let mut c = b - ratio * (b - a);
        let mut d = a + ratio * (b - a);
        let mut fc = eval(self, c);
        let mut fd = eval(self, d);
        for _ in 0..GOLDEN_ITERS {
            if fc <= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - ratio * (b - a);
                fc = eval(self, c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + ratio * (b - a);
                fd = eval(self, d);
            }
        }
    }
}

/// Selects smoothing parameters for the term set `names` by minimizing
/// GCV with coordinate descent over the log smoothing parameters.
///
/// Terms are optimized in name order whatever order the caller gives, so
/// the result does not depend on term order.
pub fn select_lambdas(data: &GamData, names: &[String]) -> Result<GamFit, GamError> {
    let mut sorted: Vec<String> = names.to_vec();
    sorted.sort();
    sorted.dedup();
    let reduced = Reduced::new(data, &sorted)?;
    let m = sorted.len();
    let mut search = Search {
        reduced: &reduced,
        best_rho: vec![0.0; m],
        best: f64::INFINITY,
        probed: Vec::new(),
    };
    let start = vec![0.0; m];
    search.score(&start);
    let mut converged = m == 0;
    let mut sweeps = 0;
    while !converged && sweeps < MAX_SWEEPS {
        sweeps += 1;
        let before = search.best;
        for j in 0..m {
            search.coordinate(j);
        }
        let improvement = before - search.best;
        converged = search.best.is_finite() && improvement <= SWEEP_REL_TOL * before.abs();
    }
    if !search.best.is_finite() {
        return Err(GamError::Singular);
    }
    let lambdas = reduced.lambdas_from_log(&search.best_rho);
    let log = LambdaSearch {
        converged,
        sweeps,
        probed: search.probed,
    };
    if !converged {
        tracing::warn!(terms = ?sorted, "GCV search hit the sweep limit");
    }
    let fit = reduced.into_fit(&lambdas, Some(log))?;
    Ok(reorder(fit, names))
}

/// Restores the caller's term order in a fit computed in sorted order.
fn reorder(fit: GamFit, names: &[String]) -> GamFit {
    let current = fit.covariates();
    let mut wanted: Vec<String> = Vec::new();
    for n in names {
        if !wanted.contains(n) {
            wanted.push(n.clone());
        }
    }
    if current == wanted {
        return fit;
    }
    let old_offsets: Vec<usize> = (0..fit.terms.len()).map(|i| fit.offset(i)).collect();
    let perm: Vec<usize> = wanted
        .iter()
        .map(|n| current.iter().position(|c| c == n).expect("same term set"))
        .collect();
    // index map from new coefficient positions to old ones
    let mut index = vec![0usize];
    for &old in &perm {
        let len = fit.terms[old].coefficients.len();
        index.extend(old_offsets[old]..old_offsets[old] + len);
    }
    let p = index.len();
    let cov = DMatrix::from_fn(p, p, |i, j| fit.coef_covariance[(index[i], index[j])]);
    let terms = perm.iter().map(|&i| fit.terms[i].clone()).collect();
    GamFit {
        terms,
        coef_covariance: cov,
        ..fit
    }
}

/// Selects smoothing parameters after building the bases from `frame`.
pub fn select_lambdas_frame(frame: &AlignedFrame, terms: &[SmoothSpec]) -> Result<(Vec<f64>, GamFit), GamError> {
    let data = GamData::from_frame(frame, terms)?;
    let names: Vec<String> = terms.iter().map(|t| t.covariate.clone()).collect();
    let fit = select_lambdas(&data, &names)?;
    Ok((fit.lambdas(), fit))
}

/// One accepted move of the stepwise search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub action: StepAction,
    pub covariate: String,
    pub aic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepAction {
    Add,
    Remove,
}

#[derive(Debug, Clone)]
pub struct StepwiseResult {
    pub fit: GamFit,
    pub path: Vec<StepRecord>,
}

fn fit_set(data: &GamData, set: &BTreeSet<String>) -> Result<GamFit, GamError> {
    let names: Vec<String> = set.iter().cloned().collect();
    select_lambdas(data, &names)
}

/// Forward selection from the intercept-only model with a backward pass
/// after every addition. Every candidate model gets its own GCV search and
/// models are compared by AIC (`n log σ̂² + 2 · total_edf`). Ties go to the
/// candidate that sorts first by name.
pub fn stepwise_select(data: &GamData, candidates: &[String]) -> Result<StepwiseResult, GamError> {
    let pool: BTreeSet<String> = candidates.iter().cloned().collect();
    for c in &pool {
        if data.basis(c).is_none() {
            return Err(GamError::UnknownCovariate(c.clone()));
        }
    }
    let mut current: BTreeSet<String> = BTreeSet::new();
    let mut best = fit_set(data, &current)?;
    let mut visited: BTreeSet<Vec<String>> = BTreeSet::new();
    visited.insert(Vec::new());
    let mut path = Vec::new();

    loop {
        let additions: Vec<String> = pool.difference(&current).cloned().collect();
        let trials: Vec<(String, BTreeSet<String>)> = additions
            .into_iter()
            .map(|c| {
                let mut s = current.clone();
                s.insert(c.clone());
                (c, s)
            })
            .filter(|(_, s)| !visited.contains(&s.iter().cloned().collect::<Vec<_>>()))
            .collect();
        let fits: Vec<Result<GamFit, GamError>> =
            trials.par_iter().map(|(_, s)| fit_set(data, s)).collect();
        let mut chosen: Option<(usize, GamFit)> = None;
        for (i, fit) in fits.into_iter().enumerate() {
            let fit = match fit {
                Ok(f) => f,
                Err(GamError::Singular) | Err(GamError::TooFewRows { .. }) => continue,
                Err(e) => return Err(e),
            };
            let improves = fit.aic < best.aic;
            let better = chosen.as_ref().is_none_or(|(_, c)| fit.aic < c.aic);
            if improves && better {
                chosen = Some((i, fit));
            }
        }
        let Some((i, fit)) = chosen else { break };
        let (added, set) = trials[i].clone();
        debug!(covariate = %added, aic = fit.aic, "stepwise add");
        path.push(StepRecord {
            action: StepAction::Add,
            covariate: added.clone(),
            aic: fit.aic,
        });
        current = set;
        visited.insert(current.iter().cloned().collect());
        best = fit;

        // backward pass
        loop {
            if current.len() <= 1 {
                break;
            }
            let removals: Vec<(String, BTreeSet<String>)> = current
                .iter()
                .filter(|c| **c != added)
                .map(|c| {
                    let mut s = current.clone();
                    s.remove(c);
                    (c.clone(), s)
                })
                .collect();
            let fits: Vec<Result<GamFit, GamError>> =
                removals.par_iter().map(|(_, s)| fit_set(data, s)).collect();
            let mut chosen: Option<(usize, GamFit)> = None;
            for (i, fit) in fits.into_iter().enumerate() {
                let Ok(fit) = fit else { continue };
                let improves = fit.aic < best.aic;
                let better = chosen.as_ref().is_none_or(|(_, c)| fit.aic < c.aic);
                if improves && better {
                    chosen = Some((i, fit));
                }
            }
            let Some((i, fit)) = chosen else { break };
            let (removed, set) = removals[i].clone();
            debug!(covariate = %removed, aic = fit.aic, "stepwise remove");
            path.push(StepRecord {
                action: StepAction::Remove,
                covariate: removed,
                aic: fit.aic,
            });
            current = set;
            visited.insert(current.iter().cloned().collect());
            best = fit;
        }
    }
    Ok(StepwiseResult { fit: best, path })
}

/// A point on a smooth curve with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothPoint {
    pub x: f64,
    pub estimate: f64,
    pub se: f64,
}

/// Estimate and pointwise standard error of one smooth on `x_grid`.
pub fn smooth_se(fit: &GamFit, term: &str, x_grid: &[f64], extrapolate: bool) -> Result<Vec<SmoothPoint>, GamError> {
    let (idx, t) = fit
        .term(term)
        .ok_or_else(|| GamError::UnknownCovariate(term.to_string()))?;
    let cov = fit.term_covariance(idx);
    let rows = t.basis.evaluator.rows(x_grid, extrapolate)?;
    Ok(curve_points(x_grid, &rows, &t.coefficients, &cov))
}

pub(crate) fn curve_points(
    xs: &[f64],
    rows: &DMatrix<f64>,
    coefs: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Vec<SmoothPoint> {
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let b = rows.row(i);
            let estimate = (b * coefs)[0];
            let var = (b * cov * b.transpose())[0];
            SmoothPoint {
                x,
                estimate,
                se: var.max(0.0).sqrt(),
            }
        })
        .collect()
}

/// `n` evenly spaced values across the knot range of `term`.
pub fn term_grid(fit: &GamFit, term: &str, n: usize) -> Option<Vec<f64>> {
    let (_, t) = fit.term(term)?;
    let (lo, hi) = t.basis.evaluator.range;
    Some(
        (0..n)
            .map(|i| {
                if i + 1 == n {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    )
}
