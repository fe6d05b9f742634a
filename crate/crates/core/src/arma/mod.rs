//! ARMA(p, q) error models fitted by exact Gaussian maximum likelihood.
//!
//! The model is `η_t = Σ ρ_j η_{t−j} + ε_t + Σ ϕ_l ε_{t−l}` with no mean
//! term; it is meant for residual series that are already centred. Series
//! are lattices of `Option<f64>` where `None` marks a missing row.

mod kalman;
pub mod transform;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use kalman::{filter, FilterStats, StateSpace};

/// How missing rows enter the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GapMode {
    /// Prediction steps without updates across missing rows.
    #[default]
    Kalman,
    /// Each observed run is an independent stretch started from the
    /// stationary distribution.
    Segmented,
    /// Missing rows are dropped and the observed values treated as
    /// consecutive.
    Concatenate,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArmaError {
    #[error("arma: {got} observations is too few for ARMA({p},{q}) (need {needed})")]
    TooShort {
        p: usize,
        q: usize,
        got: usize,
        needed: usize,
    },
    #[error("arma: series contains non-finite values")]
    NonFinite,
    #[error("arma: AR coefficients are not stationary")]
    NonStationary,
    #[error("arma: MA coefficients are not invertible")]
    NonInvertible,
    #[error("arma: innovation variance must be positive, got {0}")]
    BadVariance(f64),
    #[error("arma: ARMA({p},{q}) exceeds the largest supported state dimension {max}")]
    OrderTooLarge { p: usize, q: usize, max: usize },
    #[error("arma: every cell of the order grid failed")]
    NoCell,
}

/// Coefficients of one ARMA model. `ma` follows `1 + Σ ϕ_l z^l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmaParams {
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    pub sigma2: f64,
}

/// A fitted ARMA model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmaFit {
    pub p: usize,
    pub q: usize,
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    pub sigma2: f64,
    pub loglik: f64,
    /// `−2 loglik + 2 (p + q + 1)`.
    pub aic: f64,
    pub n_eff: usize,
    pub converged: bool,
    pub gap_mode: GapMode,
    /// One-step-ahead innovations divided by their predicted standard
    /// deviation, one per observed row.
    #[serde(skip)]
    pub innovations: Vec<f64>,
}

impl ArmaFit {
    pub fn params(&self) -> ArmaParams {
        ArmaParams {
            ar: self.ar.clone(),
            ma: self.ma.clone(),
            sigma2: self.sigma2,
        }
    }

    pub fn order(&self) -> (usize, usize) {
        (self.p, self.q)
    }
}

/// Optimizer and gap settings shared by every fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmaOptions {
    pub gap_mode: GapMode,
    pub seed: u64,
    pub max_restarts: usize,
}

impl Default for ArmaOptions {
    fn default() -> Self {
        Self {
            gap_mode: GapMode::Kalman,
            seed: 0,
            max_restarts: 5,
        }
    }
}

fn check_series(series: &[Option<f64>]) -> Result<usize, ArmaError> {
    let mut n = 0;
    for v in series.iter().flatten() {
        if !v.is_finite() {
            return Err(ArmaError::NonFinite);
        }
        n += 1;
    }
    Ok(n)
}

fn check_order(p: usize, q: usize) -> Result<(), ArmaError> {
    if p.max(q + 1) > kalman::MAX_STATE {
        return Err(ArmaError::OrderTooLarge {
            p,
            q,
            max: kalman::MAX_STATE,
        });
    }
    Ok(())
}

fn state_space(ar: &[f64], ma: &[f64]) -> Result<StateSpace, ArmaError> {
    check_order(ar.len(), ma.len())?;
    if !transform::is_stationary(ar) {
        return Err(ArmaError::NonStationary);
    }
    if !transform::is_invertible(ma) {
        return Err(ArmaError::NonInvertible);
    }
    StateSpace::new(ar, ma).ok_or(ArmaError::NonStationary)
}

/// Exact Gaussian log-likelihood of `series` with missing rows handled by
/// Kalman prediction.
pub fn arma_loglik(series: &[Option<f64>], params: &ArmaParams) -> Result<f64, ArmaError> {
    arma_loglik_with(series, params, GapMode::Kalman)
}

pub fn arma_loglik_with(
    series: &[Option<f64>],
    params: &ArmaParams,
    mode: GapMode,
) -> Result<f64, ArmaError> {
    check_series(series)?;
    if !(params.sigma2 > 0.0 && params.sigma2.is_finite()) {
        return Err(ArmaError::BadVariance(params.sigma2));
    }
    let ss = state_space(&params.ar, &params.ma)?;
    let stats = filter(&ss, series, mode, false).ok_or(ArmaError::NonStationary)?;
    Ok(stats.loglik(params.sigma2))
}

/// Objective minimized by the optimizer: `ln σ̂² + Σ ln F_t / n`, a
/// decreasing affine function of the concentrated log-likelihood.
fn objective(series: &[Option<f64>], theta: &[f64], p: usize, q: usize, mode: GapMode) -> f64 {
    let (ar, ma) = transform::to_params(theta, p, q);
    let Some(ss) = StateSpace::new(&ar, &ma) else {
        return f64::INFINITY;
    };
    match filter(&ss, series, mode, false) {
        Some(s) if s.n_obs > 0 && s.sum_v2f > 0.0 => {
            let v = s.sigma2_hat().ln() + s.sum_log_f / s.n_obs as f64;
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        }
        _ => f64::INFINITY,
    }
}

struct Minimum {
    x: Vec<f64>,
    f: f64,
    converged: bool,
}

fn gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-6 * (1.0 + x[i].abs());
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        g[i] = (up - down) / (2.0 * h);
    }
    g
}

const BFGS_MAX_ITER: usize = 200;
const GRAD_TOL: f64 = 1e-6;
/// Log-likelihood gain per iteration below which the search has stalled.
const LOGLIK_TOL: f64 = 1e-6;

/// Consecutive iterations of negligible progress that count as converged.
const STALL_ITERS: usize = 3;

/// BFGS with Armijo backtracking and central-difference gradients.
/// `ftol` is the objective decrease per iteration regarded as no progress.
fn bfgs(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], ftol: f64) -> Minimum {
    let m = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    if m == 0 {
        return Minimum {
            x,
            f: fx,
            converged: fx.is_finite(),
        };
    }
    if !fx.is_finite() {
        return Minimum {
            x,
            f: fx,
            converged: false,
        };
    }
    let mut g = gradient(f, &x);
    let mut h = DMatrix::<f64>::identity(m, m);
    let mut stalled = 0;
    for _ in 0..BFGS_MAX_ITER {
        let gnorm = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if gnorm < GRAD_TOL {
            return Minimum { x, f: fx, converged: true };
        }
        let mut d: Vec<f64> = (0..m).map(|i| -(0..m).map(|j| h[(i, j)] * g[j]).sum::<f64>()).collect();
        let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            h = DMatrix::identity(m, m);
            d = g.iter().map(|v| -v).collect();
            slope = -g.iter().map(|v| v * v).sum::<f64>();
        }
        let mut step = 1.0;
        let accepted = loop {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            let fnew = f(&xn);
            if fnew.is_finite() && fnew <= fx + 1e-4 * step * slope {
                break Some((xn, fnew));
            }
            step *= 0.5;
            if step < 1e-12 {
                break None;
            }
        };
        let Some((xn, fnew)) = accepted else {
            // no descent possible along the quasi-Newton direction
            return Minimum { x, f: fx, converged: true };
        };
        let gn = gradient(f, &xn);
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let sv = nalgebra::DVector::from_vec(s.clone());
            let yv = nalgebra::DVector::from_vec(y);
            let eye = DMatrix::<f64>::identity(m, m);
            let left = &eye - &sv * yv.transpose() * rho;
            let right = &eye - &yv * sv.transpose() * rho;
            h = &left * &h * &right + &sv * sv.transpose() * rho;
        }
        if fx - fnew <= ftol {
            stalled += 1;
        } else {
            stalled = 0;
        }
        x = xn;
        fx = fnew;
        g = gn;
        if stalled >= STALL_ITERS {
            return Minimum { x, f: fx, converged: true };
        }
    }
    Minimum {
        x,
        f: fx,
        converged: false,
    }
}

/// Hannan–Rissanen starting values on the observed stretches of `series`.
/// Returned in the unconstrained parameterization.
fn hannan_rissanen(series: &[Option<f64>], p: usize, q: usize) -> Option<Vec<f64>> {
    if p + q == 0 {
        return Some(Vec::new());
    }
    let n_obs = series.iter().flatten().count();
    let m = (p + q + 5).max(((n_obs as f64).ln() * 2.0).ceil() as usize).min(30);
    // Long AR by least squares over rows whose m lags are observed.
    let window = |t: usize, lags: usize| (1..=lags).all(|k| t >= k && series[t - k].is_some());
    let long_ar = least_squares(
        (m..series.len())
            .filter(|&t| series[t].is_some() && window(t, m))
            .map(|t| {
                let row: Vec<f64> = (1..=m).map(|k| series[t - k].unwrap()).collect();
                (row, series[t].unwrap())
            }),
        m,
    )?;
    let mut resid: Vec<Option<f64>> = vec![None; series.len()];
    for t in m..series.len() {
        if series[t].is_some() && window(t, m) {
            let pred: f64 = (1..=m).map(|k| long_ar[k - 1] * series[t - k].unwrap()).sum();
            resid[t] = Some(series[t].unwrap() - pred);
        }
    }
    let ok = |t: usize| {
        series[t].is_some()
            && window(t, p)
            && (1..=q).all(|k| t >= k && resid[t - k].is_some())
    };
    let coefs = least_squares(
        (0..series.len()).filter(|&t| ok(t)).map(|t| {
            let row: Vec<f64> = (1..=p)
                .map(|k| series[t - k].unwrap())
                .chain((1..=q).map(|k| resid[t - k].unwrap()))
                .collect();
            (row, series[t].unwrap())
        }),
        p + q,
    )?;
    let mut ar = coefs[..p].to_vec();
    let mut ma = coefs[p..].to_vec();
    // pull toward zero until the start lies strictly inside the region
    for _ in 0..200 {
        if let Some(theta) = transform::from_params(&ar, &ma) {
            if theta.iter().all(|v| v.abs() < 4.0) {
                return Some(theta);
            }
        }
        for (j, c) in ar.iter_mut().enumerate() {
            *c *= 0.95f64.powi(j as i32 + 1);
        }
        for (j, c) in ma.iter_mut().enumerate() {
            *c *= 0.95f64.powi(j as i32 + 1);
        }
    }
    None
}

fn least_squares(rows: impl Iterator<Item = (Vec<f64>, f64)>, k: usize) -> Option<Vec<f64>> {
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xty = nalgebra::DVector::<f64>::zeros(k);
    let mut count = 0;
    for (row, y) in rows {
        for i in 0..k {
            xty[i] += row[i] * y;
            for j in 0..=i {
                xtx[(i, j)] += row[i] * row[j];
            }
        }
        count += 1;
    }
    if count < 2 * k {
        return None;
    }
    for i in 0..k {
        for j in 0..i {
            xtx[(j, i)] = xtx[(i, j)];
        }
    }
    let sol = xtx.cholesky()?.solve(&xty);
    sol.iter().all(|v| v.is_finite()).then(|| sol.iter().copied().collect())
}

/// Fits ARMA(p, q) by maximizing the exact likelihood with the innovation
/// variance profiled out.
pub fn fit_arma(series: &[Option<f64>], p: usize, q: usize, opts: &ArmaOptions) -> Result<ArmaFit, ArmaError> {
    let n_obs = check_series(series)?;
    check_order(p, q)?;
    let needed = 10 * (p + q + 1);
    if n_obs < needed {
        return Err(ArmaError::TooShort {
            p,
            q,
            got: n_obs,
            needed,
        });
    }
    let mode = opts.gap_mode;
    let f = |theta: &[f64]| objective(series, theta, p, q, mode);
    // the objective is −2 loglik / n up to a constant
    let ftol = 2.0 * LOGLIK_TOL / n_obs as f64;

    let zero = vec![0.0; p + q];
    let start = match hannan_rissanen(series, p, q) {
        Some(hr) if f(&hr) < f(&zero) => hr,
        _ => zero,
    };
    let mut best = bfgs(&f, &start, ftol);
    if !best.converged {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ ((p as u64) << 32) ^ ((q as u64) << 40));
        let jitter = Normal::new(0.0, 0.5).expect("valid normal");
        for _ in 0..opts.max_restarts {
            let x0: Vec<f64> = best.x.iter().map(|v| v + jitter.sample(&mut rng)).collect();
            let trial = bfgs(&f, &x0, ftol);
            let better = trial.f < best.f || (trial.converged && trial.f <= best.f);
            if better {
                best = trial;
            }
            if best.converged {
                break;
            }
        }
    }
    if !best.f.is_finite() {
        return Err(ArmaError::NonStationary);
    }
    let (ar, ma) = transform::to_params(&best.x, p, q);
    let ss = StateSpace::new(&ar, &ma).ok_or(ArmaError::NonStationary)?;
    let stats = filter(&ss, series, mode, true).ok_or(ArmaError::NonStationary)?;
    Ok(assemble(p, q, ar, ma, &stats, best.converged, mode))
}

fn assemble(
    p: usize,
    q: usize,
    ar: Vec<f64>,
    ma: Vec<f64>,
    stats: &FilterStats,
    converged: bool,
    mode: GapMode,
) -> ArmaFit {
    let sigma2 = stats.sigma2_hat();
    let loglik = stats.loglik(sigma2);
    let innovations = stats
        .innovations
        .as_ref()
        .map(|v| v.iter().map(|(e, f)| e / (sigma2 * f).sqrt()).collect())
        .unwrap_or_default();
    ArmaFit {
        p,
        q,
        ar,
        ma,
        sigma2,
        loglik,
        aic: -2.0 * loglik + 2.0 * (p + q + 1) as f64,
        n_eff: stats.n_obs,
        converged,
        gap_mode: mode,
        innovations,
    }
}

/// Innovation variance, likelihood and innovations of `series` at fixed
/// coefficients (the variance is re-estimated).
pub fn evaluate_arma(
    series: &[Option<f64>],
    ar: &[f64],
    ma: &[f64],
    mode: GapMode,
) -> Result<ArmaFit, ArmaError> {
    check_series(series)?;
    let ss = state_space(ar, ma)?;
    let stats = filter(&ss, series, mode, true).ok_or(ArmaError::NonStationary)?;
    Ok(assemble(ar.len(), ma.len(), ar.to_vec(), ma.to_vec(), &stats, true, mode))
}

/// Outcome of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderCell {
    pub p: usize,
    pub q: usize,
    pub aic: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderSelection {
    pub best: ArmaFit,
    pub cells: Vec<OrderCell>,
}

/// Fits every cell of the `(0..=p_max) × (0..=q_max)` grid and keeps the
/// minimum AIC. Ties go to the smaller `p + q`, then the smaller `p`.
pub fn select_order(
    series: &[Option<f64>],
    p_max: usize,
    q_max: usize,
    opts: &ArmaOptions,
) -> Result<OrderSelection, ArmaError> {
    let grid: Vec<(usize, usize)> = (0..=p_max)
        .flat_map(|p| (0..=q_max).map(move |q| (p, q)))
        .collect();
    let fits: Vec<Result<ArmaFit, ArmaError>> = grid
        .par_iter()
        .map(|&(p, q)| fit_arma(series, p, q, opts))
        .collect();
    let mut best: Option<ArmaFit> = None;
    let mut cells = Vec::with_capacity(grid.len());
    for (&(p, q), fit) in grid.iter().zip(fits) {
        match fit {
            Ok(fit) => {
                cells.push(OrderCell {
                    p,
                    q,
                    aic: Some(fit.aic),
                    converged: fit.converged,
                    error: None,
                });
                let key = |f: &ArmaFit| (f.aic, f.p + f.q, f.p);
                let replace = best.as_ref().is_none_or(|b| {
                    key(&fit).partial_cmp(&key(b)) == Some(std::cmp::Ordering::Less)
                });
                if replace {
                    best = Some(fit);
                }
            }
            Err(e) => cells.push(OrderCell {
                p,
                q,
                aic: None,
                converged: false,
                error: Some(e.to_string()),
            }),
        }
    }
    let best = best.ok_or(ArmaError::NoCell)?;
    Ok(OrderSelection { best, cells })
}

/// Asymptotic standard errors of `(ρ, ϕ)` from the numerically
/// differentiated profile log-likelihood at the fitted coefficients.
pub fn coefficient_se(series: &[Option<f64>], fit: &ArmaFit) -> Option<Vec<f64>> {
    let k = fit.p + fit.q;
    if k == 0 {
        return Some(Vec::new());
    }
    let x0: Vec<f64> = fit.ar.iter().chain(&fit.ma).copied().collect();
    let ll = |x: &[f64]| -> f64 {
        let ss = match StateSpace::new(&x[..fit.p], &x[fit.p..]) {
            Some(s) if transform::is_stationary(&x[..fit.p]) && transform::is_invertible(&x[fit.p..]) => s,
            _ => return f64::NAN,
        };
        filter(&ss, series, fit.gap_mode, false)
            .map(|s| s.concentrated_loglik())
            .unwrap_or(f64::NAN)
    };
    let h = 1e-4;
    let mut hess = DMatrix::<f64>::zeros(k, k);
    let f0 = ll(&x0);
    for i in 0..k {
        for j in 0..=i {
            let at = |di: f64, dj: f64| {
                let mut x = x0.clone();
                x[i] += di;
                x[j] += dj;
                ll(&x)
            };
            let v = if i == j {
                (at(h, 0.0) - 2.0 * f0 + at(-h, 0.0)) / (h * h)
            } else {
                (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h)
            };
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    let info = -hess;
    let cov = info.try_inverse()?;
    (0..k)
        .map(|i| (cov[(i, i)] > 0.0).then(|| cov[(i, i)].sqrt()))
        .collect()
}

/// Ljung–Box portmanteau statistic and its χ² p-value with `lag − fitted`
/// degrees of freedom.
pub fn ljung_box(x: &[f64], lag: usize, fitted: usize) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let c0: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    let mut q = 0.0;
    for k in 1..=lag {
        let ck: f64 = (k..x.len()).map(|t| (x[t] - mean) * (x[t - k] - mean)).sum();
        let r = ck / c0;
        q += r * r / (n - k as f64);
    }
    q *= n * (n + 2.0);
    let df = (lag - fitted).max(1) as f64;
    let p = 1.0 - ChiSquared::new(df).expect("positive df").cdf(q);
    (q, p)
}

/// Draws `n` values of a zero-mean ARMA process after a burn-in.
pub fn simulate_arma<R: Rng + ?Sized>(params: &ArmaParams, n: usize, rng: &mut R) -> Vec<f64> {
    let burn = 1000;
    let normal = Normal::new(0.0, params.sigma2.sqrt()).expect("positive variance");
    let p = params.ar.len();
    let q = params.ma.len();
    let total = n + burn;
    let mut eps = Vec::with_capacity(total);
    let mut eta: Vec<f64> = Vec::with_capacity(total);
    for t in 0..total {
        let e = normal.sample(rng);
        let mut v = e;
        for j in 1..=p.min(t) {
            v += params.ar[j - 1] * eta[t - j];
        }
        for l in 1..=q.min(t) {
            v += params.ma[l - 1] * eps[t - l];
        }
        eps.push(e);
        eta.push(v);
    }
    eta.split_off(burn)
}

/// Autocovariances `γ(0), …, γ(n − 1)` of a stationary ARMA process.
pub fn autocovariances(params: &ArmaParams, n: usize) -> Result<Vec<f64>, ArmaError> {
    let ss = state_space(&params.ar, &params.ma)?;
    Ok(kalman::autocovariances(&ss, n)
        .into_iter()
        .map(|g| g * params.sigma2)
        .collect())
}
