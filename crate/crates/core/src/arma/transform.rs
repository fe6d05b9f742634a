//! Maps between unconstrained reals and stationary/invertible polynomials.
//!
//! Each coordinate goes through `tanh` to a partial autocorrelation in
//! (−1, 1); the Durbin–Levinson recursion then yields the coefficients of
//! a polynomial `1 − Σ φ_j z^j` with all roots outside the unit circle.

/// Partial autocorrelations to AR coefficients `φ` of `1 − Σ φ_j z^j`.
pub fn pacf_to_ar(u: &[f64]) -> Vec<f64> {
    let mut phi: Vec<f64> = Vec::with_capacity(u.len());
    for (k, &uk) in u.iter().enumerate() {
        let prev = phi.clone();
        for j in 0..k {
            phi[j] = prev[j] - uk * prev[k - 1 - j];
        }
        phi.push(uk);
    }
    phi
}

/// Inverse of [`pacf_to_ar`]. `None` when the polynomial is not strictly
/// stationary.
pub fn ar_to_pacf(phi: &[f64]) -> Option<Vec<f64>> {
    let p = phi.len();
    let mut cur = phi.to_vec();
    let mut u = vec![0.0; p];
    for k in (0..p).rev() {
        let uk = cur[k];
        if !uk.is_finite() || uk.abs() >= 1.0 {
            return None;
        }
        u[k] = uk;
        let denom = 1.0 - uk * uk;
        let prev: Vec<f64> = (0..k).map(|j| (cur[j] + uk * cur[k - 1 - j]) / denom).collect();
        cur = prev;
    }
    Some(u)
}

/// Unconstrained vector to `(ρ, ϕ)`; MA coefficients use the sign
/// convention `1 + Σ ϕ_l z^l`.
pub fn to_params(theta: &[f64], p: usize, q: usize) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(theta.len(), p + q);
    let ua: Vec<f64> = theta[..p].iter().map(|t| t.tanh()).collect();
    let um: Vec<f64> = theta[p..].iter().map(|t| t.tanh()).collect();
    let ar = pacf_to_ar(&ua);
    let ma = pacf_to_ar(&um).into_iter().map(|v| -v).collect();
    (ar, ma)
}

/// Inverse of [`to_params`]. `None` when `ar` is not stationary or `ma` not
/// invertible.
pub fn from_params(ar: &[f64], ma: &[f64]) -> Option<Vec<f64>> {
    let ua = ar_to_pacf(ar)?;
    let neg: Vec<f64> = ma.iter().map(|v| -v).collect();
    let um = ar_to_pacf(&neg)?;
    Some(ua.iter().chain(&um).map(|u| u.atanh()).collect())
}

pub fn is_stationary(ar: &[f64]) -> bool {
    ar_to_pacf(ar).is_some()
}

pub fn is_invertible(ma: &[f64]) -> bool {
    let neg: Vec<f64> = ma.iter().map(|v| -v).collect();
    ar_to_pacf(&neg).is_some()
}
