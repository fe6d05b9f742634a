//! Harvey-form state space for ARMA(p, q) and the Kalman filter that
//! evaluates its exact Gaussian likelihood.
//!
//! With `r = max(p, q + 1)` the state obeys `α_{t+1} = T α_t + R ε_{t+1}`
//! and `y_t = α_{t,0}`, where `T` carries the AR coefficients in its first
//! column over a shifted identity and `R = (1, ϕ₁, …, ϕ_{r−1})`. All
//! variances are in units of the innovation variance.

use nalgebra::{DMatrix, DVector};

use super::GapMode;

const STEADY_TOL: f64 = 1e-14;

pub(crate) struct StateSpace {
    r: usize,
    ar: Vec<f64>,
    rrt: Vec<f64>,
    p0: Vec<f64>,
}

impl StateSpace {
    /// `None` if the stationary covariance equation is singular.
    pub(crate) fn new(ar: &[f64], ma: &[f64]) -> Option<Self> {
        let r = ar.len().max(ma.len() + 1);
        let mut arp = vec![0.0; r];
        arp[..ar.len()].copy_from_slice(ar);
        let mut rv = vec![0.0; r];
        rv[0] = 1.0;
        rv[1..=ma.len()].copy_from_slice(ma);
        let rrt: Vec<f64> = (0..r * r).map(|k| rv[k / r] * rv[k % r]).collect();
        let p0 = stationary_covariance(&arp, &rrt, r)?;
        Some(Self {
            r,
            ar: arp,
            rrt,
            p0,
        })
    }

    #[inline]
    fn predict_state(&self, a: &mut [f64]) {
        let a0 = a[0];
        for i in 0..self.r {
            let next = if i + 1 < self.r { a[i + 1] } else { 0.0 };
            a[i] = self.ar[i] * a0 + next;
        }
    }
}

/// Solves `P = T P Tᵀ + R Rᵀ` through its vectorized linear system.
fn stationary_covariance(ar: &[f64], rrt: &[f64], r: usize) -> Option<Vec<f64>> {
    let t = DMatrix::from_fn(r, r, |i, j| {
        if j == 0 {
            ar[i]
        } else if j == i + 1 {
            1.0
        } else {
            0.0
        }
    });
    let kron = t.kronecker(&t);
    let system = DMatrix::identity(r * r, r * r) - kron;
    let rhs = DVector::from_fn(r * r, |k, _| rrt[(k % r) * r + k / r]);
    let sol = system.lu().solve(&rhs)?;
    let mut p = vec![0.0; r * r];
    for k in 0..r * r {
        // column-major vec
        p[(k % r) * r + k / r] = sol[k];
    }
    for i in 0..r {
        for j in 0..i {
            let m = 0.5 * (p[i * r + j] + p[j * r + i]);
            p[i * r + j] = m;
            p[j * r + i] = m;
        }
    }
    if p[0] > 0.0 && p.iter().all(|v| v.is_finite()) {
        Some(p)
    } else {
        None
    }
}

/// Sufficient statistics of one filter pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct FilterStats {
    /// `Σ v_t² / F_t` over observed steps.
    pub sum_v2f: f64,
    /// `Σ ln F_t` over observed steps.
    pub sum_log_f: f64,
    pub n_obs: usize,
    /// `(v_t, F_t)` per observed step, if requested.
    pub innovations: Option<Vec<(f64, f64)>>,
}

impl FilterStats {
    /// Exact log-likelihood at innovation variance `sigma2`.
    pub(crate) fn loglik(&self, sigma2: f64) -> f64 {
        let n = self.n_obs as f64;
        -0.5 * (n * (2.0 * std::f64::consts::PI).ln()
            + n * sigma2.ln()
            + self.sum_log_f
            + self.sum_v2f / sigma2)
    }

    pub(crate) fn sigma2_hat(&self) -> f64 {
        self.sum_v2f / self.n_obs as f64
    }

    /// Log-likelihood with the innovation variance profiled out.
    pub(crate) fn concentrated_loglik(&self) -> f64 {
        self.loglik(self.sigma2_hat())
    }
}

/// Largest state dimension the filter supports.
pub(crate) const MAX_STATE: usize = 8;

/// Runs the filter over `series`; `None` marks a missing observation.
/// Returns `None` if a prediction variance stops being positive.
pub(crate) fn filter(
    ss: &StateSpace,
    series: &[Option<f64>],
    mode: GapMode,
    keep_innovations: bool,
) -> Option<FilterStats> {
    match ss.r {
        1 => filter_fixed::<1>(ss, series, mode, keep_innovations),
        2 => filter_fixed::<2>(ss, series, mode, keep_innovations),
        3 => filter_fixed::<3>(ss, series, mode, keep_innovations),
        4 => filter_fixed::<4>(ss, series, mode, keep_innovations),
        5 => filter_fixed::<5>(ss, series, mode, keep_innovations),
        6 => filter_fixed::<6>(ss, series, mode, keep_innovations),
        7 => filter_fixed::<7>(ss, series, mode, keep_innovations),
        8 => filter_fixed::<8>(ss, series, mode, keep_innovations),
        r => panic!("state dimension {r} exceeds {MAX_STATE}"),
    }
}

type Mat<const R: usize> = [[f64; R]; R];

#[inline(always)]
fn predict_state<const R: usize>(ar: &[f64; R], a: &mut [f64; R]) {
    let a0 = a[0];
    for i in 0..R {
        let next = if i + 1 < R { a[i + 1] } else { 0.0 };
        a[i] = ar[i] * a0 + next;
    }
}

/// `T P Tᵀ + R Rᵀ`.
#[inline(always)]
fn predict_cov<const R: usize>(ar: &[f64; R], rrt: &Mat<R>, p: &Mat<R>) -> Mat<R> {
    let mut tp = [[0.0; R]; R];
    for i in 0..R {
        for j in 0..R {
            let below = if i + 1 < R { p[i + 1][j] } else { 0.0 };
            tp[i][j] = ar[i] * p[0][j] + below;
        }
    }
    let mut out = [[0.0; R]; R];
    for i in 0..R {
        for j in 0..R {
            let right = if j + 1 < R { tp[i][j + 1] } else { 0.0 };
            out[i][j] = ar[j] * tp[i][0] + right + rrt[i][j];
        }
    }
    out
}

fn filter_fixed<const R: usize>(
    ss: &StateSpace,
    series: &[Option<f64>],
    mode: GapMode,
    keep_innovations: bool,
) -> Option<FilterStats> {
    let ar: [f64; R] = std::array::from_fn(|i| ss.ar[i]);
    let rrt: Mat<R> = std::array::from_fn(|i| std::array::from_fn(|j| ss.rrt[i * R + j]));
    let p0: Mat<R> = std::array::from_fn(|i| std::array::from_fn(|j| ss.p0[i * R + j]));
    let mut a = [0.0; R];
    let mut p = p0;
    let mut steady: Option<(f64, [f64; R])> = None;
    let mut pending_reset = false;
    let mut stats = FilterStats {
        innovations: keep_innovations.then(Vec::new),
        ..Default::default()
    };
    for obs in series {
        let Some(y) = *obs else {
            match mode {
                GapMode::Concatenate => {}
                GapMode::Segmented => pending_reset = true,
                GapMode::Kalman => {
                    steady = None;
                    predict_state(&ar, &mut a);
                    p = predict_cov(&ar, &rrt, &p);
                }
            }
            continue;
        };
        if pending_reset {
            a = [0.0; R];
            p = p0;
            steady = None;
            pending_reset = false;
        }
        let v = y - a[0];
        let f = match &steady {
            Some((f, k)) => {
                for i in 0..R {
                    a[i] += k[i] * v;
                }
                predict_state(&ar, &mut a);
                *f
            }
            None => {
                let f = p[0][0];
                if !(f > 0.0) || !f.is_finite() {
                    return None;
                }
                let col: [f64; R] = std::array::from_fn(|i| p[i][0]);
                let inv_f = 1.0 / f;
                let mut upd = p;
                for i in 0..R {
                    a[i] += col[i] * inv_f * v;
                    let ci = col[i] * inv_f;
                    for j in 0..R {
                        upd[i][j] -= ci * col[j];
                    }
                }
                predict_state(&ar, &mut a);
                let next = predict_cov(&ar, &rrt, &upd);
                let mut scale = 1.0f64;
                let mut moved = 0.0f64;
                for i in 0..R {
                    for j in 0..R {
                        scale = scale.max(next[i][j].abs());
                        moved = moved.max((next[i][j] - p[i][j]).abs());
                    }
                }
                p = next;
                if moved <= STEADY_TOL * scale {
                    let k = std::array::from_fn(|i| p[i][0] / p[0][0]);
                    steady = Some((p[0][0], k));
                }
                f
            }
        };
        stats.sum_v2f += v * v / f;
        stats.sum_log_f += f.ln();
        stats.n_obs += 1;
        if let Some(inn) = stats.innovations.as_mut() {
            inn.push((v, f));
        }
    }
    Some(stats)
}

/// Autocovariances `γ(0..n)` of a unit-variance-innovation ARMA process,
/// read off the state-space covariance: `γ(h) = (T^h P₀)₀₀`.
pub(crate) fn autocovariances(ss: &StateSpace, n: usize) -> Vec<f64> {
    let r = ss.r;
    // first row of T^h P0 evolves as column 0 of P0 under T
    let mut col: Vec<f64> = (0..r).map(|i| ss.p0[i * r]).collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(col[0]);
        ss.predict_state(&mut col);
    }
    out
}
