//! Univariate thin-plate regression spline bases and VIF diagnostics.
//!
//! A basis is built on (at most 1000) representative covariate values:
//! the cubic radial kernel `|r|³/12` plus the linear null space, truncated
//! to the `k` dominant eigenvectors of the kernel matrix, then reduced to
//! `k − 1` columns by centering (the sum-to-zero identifiability
//! constraint). The penalty equals the integrated squared second
//! derivative `∫ s''(x)² dx` in the covariate's own units.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{complement_basis, top_abs_eigen};

/// Default basis dimension: `k − 1 = 6` maximum degrees of freedom.
pub const DEFAULT_BASIS_DIM: usize = 7;
/// Upper bound on representative values used to build the kernel.
pub const MAX_KNOTS: usize = 1000;
/// Conventional VIF screening threshold.
pub const DEFAULT_VIF_THRESHOLD: f64 = 6.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("basis: {covariate} has {distinct} distinct values but k = {k}; use a smaller basis dimension")]
    Rank {
        covariate: String,
        distinct: usize,
        k: usize,
    },
    #[error("basis: {0} contains non-finite values")]
    NonFinite(String),
    #[error("basis: basis dimension must be at least 3, got {0}")]
    BasisDim(usize),
    #[error("basis: expected {expected} coefficients, got {got}")]
    CoefLength { expected: usize, got: usize },
    #[error("basis: {covariate} value {value} outside [{lo}, {hi}] and extrapolation is off")]
    Extrapolation {
        covariate: String,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("vif: column {0} is constant")]
    DegenerateColumn(String),
    #[error("vif: need at least two columns")]
    TooFewColumns,
    #[error("vif: columns differ in length")]
    LengthMismatch,
}

/// Smooth term request for one covariate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmoothSpec {
    pub covariate: String,
    pub basis_dim: usize,
}

impl SmoothSpec {
    pub fn new(covariate: impl Into<String>) -> Self {
        Self {
            covariate: covariate.into(),
            basis_dim: DEFAULT_BASIS_DIM,
        }
    }

    pub fn with_basis_dim(mut self, k: usize) -> Self {
        self.basis_dim = k;
        self
    }

    /// Maximum effective degrees of freedom after the centering constraint.
    pub fn max_edf(&self) -> usize {
        self.basis_dim - 1
    }
}

/// Everything needed to evaluate a fitted smooth at new covariate values.
/// Serializable so a smooth can be re-evaluated from a saved report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothEvaluator {
    pub covariate: String,
    /// Standardization: `u = (x − shift) / scale`.
    pub shift: f64,
    pub scale: f64,
    /// Knots in standardized units.
    pub knots: Vec<f64>,
    /// `knots.len() × (k − 2)` map from kernel evaluations to basis columns,
    /// row-major.
    pub kernel_map: Vec<Vec<f64>>,
    /// Column means removed by the centering constraint (`k − 1`).
    pub centering: Vec<f64>,
    /// Column scale factors applied after centering (`k − 1`).
    pub column_scale: Vec<f64>,
    /// Covariate range spanned by the knots, in original units.
    pub range: (f64, f64),
}

impl SmoothEvaluator {
    pub fn n_coefs(&self) -> usize {
        self.centering.len()
    }

    fn check_range(&self, x: f64, extrapolate: bool) -> Result<(), BasisError> {
        if !x.is_finite() {
            return Err(BasisError::NonFinite(self.covariate.clone()));
        }
        let (lo, hi) = self.range;
        if !extrapolate && (x < lo || x > hi) {
            return Err(BasisError::Extrapolation {
                covariate: self.covariate.clone(),
                value: x,
                lo,
                hi,
            });
        }
        Ok(())
    }

    /// Constrained basis row at `x`. Outside the knot range the thin-plate
    /// smooth is exactly linear, so direct evaluation is linear extrapolation.
    pub fn row(&self, x: f64) -> Vec<f64> {
        let u = (x - self.shift) / self.scale;
        let nk = self.n_coefs() - 1;
        let mut raw = vec![0.0; nk + 1];
        for (knot, map_row) in self.knots.iter().zip(&self.kernel_map) {
            let r = (u - knot).abs();
            let e = r * r * r / 12.0;
            for (acc, m) in raw.iter_mut().zip(map_row) {
                *acc += e * m;
            }
        }
        raw[nk] = u;
        raw.iter()
            .zip(&self.centering)
            .zip(&self.column_scale)
            .map(|((v, c), s)| (v - c) / s)
            .collect()
    }

    pub fn rows(&self, xs: &[f64], extrapolate: bool) -> Result<DMatrix<f64>, BasisError> {
        let p = self.n_coefs();
        let mut out = DMatrix::zeros(xs.len(), p);
        for (i, &x) in xs.iter().enumerate() {
            self.check_range(x, extrapolate)?;
            for (j, v) in self.row(x).into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }
}

/// A constrained thin-plate basis evaluated at the training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisExpansion {
    pub covariate: String,
    /// `n × (k − 1)`, every column sums to zero.
    pub design: DMatrix<f64>,
    /// `(k − 1) × (k − 1)` symmetric positive semidefinite.
    pub penalty: DMatrix<f64>,
    /// Unpenalized dimension after the constraint (the linear trend).
    pub null_dim: usize,
    /// Representative covariate values, original units, sorted.
    pub knot_values: Vec<f64>,
    pub evaluator: SmoothEvaluator,
}

impl BasisExpansion {
    pub fn n_coefs(&self) -> usize {
        self.design.ncols()
    }

    pub fn centering(&self) -> &[f64] {
        &self.evaluator.centering
    }

    /// Coefficient vector reproducing the centered linear function `x`.
    pub fn linear_coefs(&self) -> DVector<f64> {
        let p = self.n_coefs();
        let mut c = DVector::zeros(p);
        c[p - 1] = self.evaluator.column_scale[p - 1] * self.evaluator.scale;
        c
    }
}

fn distinct_sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

fn representative_values(distinct: &[f64]) -> Vec<f64> {
    let m = distinct.len();
    if m <= MAX_KNOTS {
        return distinct.to_vec();
    }
    (0..MAX_KNOTS)
        .map(|i| {
            let idx = (i as f64 * (m - 1) as f64 / (MAX_KNOTS - 1) as f64).round() as usize;
            distinct[idx]
        })
        .collect()
}

/// Builds the constrained thin-plate regression spline basis for `x`.
pub fn tprs_basis(x: &[f64], spec: &SmoothSpec) -> Result<BasisExpansion, BasisError> {
    let k = spec.basis_dim;
    if k < 3 {
        return Err(BasisError::BasisDim(k));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(BasisError::NonFinite(spec.covariate.clone()));
    }
    let distinct = distinct_sorted(x);
    if distinct.len() < k {
        return Err(BasisError::Rank {
            covariate: spec.covariate.clone(),
            distinct: distinct.len(),
            k,
        });
    }
    let n = x.len() as f64;
    let shift = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - shift).powi(2)).sum::<f64>() / n;
    let scale = var.sqrt();

    let knot_values = representative_values(&distinct);
    let knots: Vec<f64> = knot_values.iter().map(|v| (v - shift) / scale).collect();
    let m = knots.len();

    let kernel = DMatrix::from_fn(m, m, |i, j| {
        let r = (knots[i] - knots[j]).abs();
        r * r * r / 12.0
    });
    let (eigvals, eigvecs) = top_abs_eigen(&kernel, k);

    // Null space polynomials at the knots, projected onto the truncated
    // eigenbasis; Z spans coefficient vectors orthogonal to them.
    let t = DMatrix::from_fn(m, 2, |i, j| if j == 0 { 1.0 } else { knots[i] });
    let projected = eigvecs.transpose() * &t;
    let z = complement_basis(&projected);
    let kernel_map = &eigvecs * &z; // m × (k−2)
    let wiggle = z.transpose() * DMatrix::from_diagonal(&eigvals) * &z;

    // Raw columns at the data: kernel part then the linear term.
    let nk = k - 2;
    let mut raw = DMatrix::zeros(x.len(), k - 1);
    for (i, &xi) in x.iter().enumerate() {
        let u = (xi - shift) / scale;
        for (j, &knot) in knots.iter().enumerate() {
            let r = (u - knot).abs();
            let e = r * r * r / 12.0;
            if e != 0.0 {
                for c in 0..nk {
                    raw[(i, c)] += e * kernel_map[(j, c)];
                }
            }
        }
        raw[(i, nk)] = u;
    }
    let centering: Vec<f64> = raw.column_iter().map(|c| c.sum() / n).collect();
    for (c, mean) in centering.iter().enumerate() {
        raw.column_mut(c).add_scalar_mut(-mean);
    }
    let column_scale: Vec<f64> = raw
        .column_iter()
        .map(|c| {
            let s = (c.norm_squared() / n).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    for (c, s) in column_scale.iter().enumerate() {
        raw.column_mut(c).scale_mut(1.0 / s);
    }

    // Penalty in original units: ∫ s''(x)² dx = scale⁻³ ∫ s''(u)² du,
    // expressed in the column-scaled parameterization.
    let unit = scale.powi(-3);
    let mut penalty = DMatrix::zeros(k - 1, k - 1);
    for i in 0..nk {
        for j in 0..nk {
            penalty[(i, j)] = unit * wiggle[(i, j)] / (column_scale[i] * column_scale[j]);
        }
    }
    let penalty = (&penalty + penalty.transpose()) * 0.5;

    let evaluator = SmoothEvaluator {
        covariate: spec.covariate.clone(),
        shift,
        scale,
        knots,
        kernel_map: kernel_map.row_iter().map(|r| r.iter().copied().collect()).collect(),
        centering,
        column_scale,
        range: (knot_values[0], knot_values[m - 1]),
    };
    Ok(BasisExpansion {
        covariate: spec.covariate.clone(),
        design: raw,
        penalty,
        null_dim: 1,
        knot_values,
        evaluator,
    })
}

/// Evaluates `s(x) = B(x) · coefs` with the basis' own centering.
pub fn evaluate_smooth(
    basis: &BasisExpansion,
    coefs: &DVector<f64>,
    x_new: &[f64],
    extrapolate: bool,
) -> Result<Vec<f64>, BasisError> {
    evaluate_with(&basis.evaluator, coefs.as_slice(), x_new, extrapolate)
}

/// Same as [`evaluate_smooth`] working from a detached evaluator.
pub fn evaluate_with(
    evaluator: &SmoothEvaluator,
    coefs: &[f64],
    x_new: &[f64],
    extrapolate: bool,
) -> Result<Vec<f64>, BasisError> {
    if coefs.len() != evaluator.n_coefs() {
        return Err(BasisError::CoefLength {
            expected: evaluator.n_coefs(),
            got: coefs.len(),
        });
    }
    x_new
        .iter()
        .map(|&x| {
            evaluator.check_range(x, extrapolate)?;
            Ok(evaluator.row(x).iter().zip(coefs).map(|(b, c)| b * c).sum())
        })
        .collect()
}

/// One row of a VIF table; `vif` is `+∞` under perfect collinearity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VifEntry {
    pub name: String,
    #[serde(with = "infinite_as_null")]
    pub vif: f64,
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Ratio `1 − R²` below which the VIF is reported as infinite.
const VIF_SATURATION: f64 = 1e-12;

/// Variance inflation factors: `1 / (1 − R²_j)` with `R²_j` from the
/// least-squares regression of column `j` on all others plus an intercept.
pub fn vif(columns: &[(String, Vec<f64>)]) -> Result<Vec<VifEntry>, BasisError> {
    if columns.len() < 2 {
        return Err(BasisError::TooFewColumns);
    }
    let n = columns[0].1.len();
    if columns.iter().any(|(_, c)| c.len() != n) {
        return Err(BasisError::LengthMismatch);
    }
    // Standardize each column; the intercept is absorbed by centering.
    let mut std_cols = Vec::with_capacity(columns.len());
    for (name, c) in columns {
        if c.iter().any(|v| !v.is_finite()) {
            return Err(BasisError::NonFinite(name.clone()));
        }
        let mean = c.iter().sum::<f64>() / n as f64;
        let ss = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        let max_abs = c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if ss <= (1e-14 * max_abs).powi(2) * n as f64 || ss == 0.0 {
            return Err(BasisError::DegenerateColumn(name.clone()));
        }
        let sd = (ss / n as f64).sqrt();
        std_cols.push(DVector::from_iterator(n, c.iter().map(|v| (v - mean) / sd)));
    }
    let p = columns.len();
    let mut out = Vec::with_capacity(p);
    for j in 0..p {
        let others = DMatrix::from_fn(n, p - 1, |i, c| {
            let src = if c < j { c } else { c + 1 };
            std_cols[src][i]
        });
        let y = &std_cols[j];
        let svd = others.clone().svd(true, true);
        let max_sv = svd.singular_values.max();
        let beta = svd
            .solve(y, 1e-12 * max_sv)
            .expect("both singular vector sets were computed");
        let resid = y - &others * beta;
        let one_minus_r2 = resid.norm_squared() / y.norm_squared();
        let value = if one_minus_r2 < VIF_SATURATION {
            f64::INFINITY
        } else {
            1.0 / one_minus_r2
        };
        out.push(VifEntry {
            name: columns[j].0.clone(),
            vif: value,
        });
    }
    Ok(out)
}

/// Outcome of iterative VIF screening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VifScreen {
    pub threshold: f64,
    /// VIFs of the full candidate set.
    pub initial: Vec<VifEntry>,
    /// Columns dropped, in removal order.
    pub excluded: Vec<String>,
    pub retained: Vec<String>,
}

/// Repeatedly drops the column with the largest VIF while it is at or above
/// `threshold`, recomputing after each removal. Stops with one column left.
pub fn vif_screen(columns: &[(String, Vec<f64>)], threshold: f64) -> Result<VifScreen, BasisError> {
    let initial = vif(columns)?;
    let mut current: Vec<(String, Vec<f64>)> = columns.to_vec();
    let mut excluded = Vec::new();
    let mut table = initial.clone();
    while current.len() > 1 {
        let worst = table
            .iter()
            .enumerate()
            .filter(|(_, e)| e.vif >= threshold)
            .max_by(|a, b| a.1.vif.total_cmp(&b.1.vif).then(b.0.cmp(&a.0)));
        let Some((idx, _)) = worst else { break };
        excluded.push(current.remove(idx).0);
        if current.len() > 1 {
            table = vif(&current)?;
        }
    }
    Ok(VifScreen {
        threshold,
        initial,
        excluded,
        retained: current.into_iter().map(|(n, _)| n).collect(),
    })
}
