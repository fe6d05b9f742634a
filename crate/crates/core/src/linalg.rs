//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Orthonormal basis of the null space of `mᵀ` (the orthogonal complement
/// of the column span of `m`), computed with explicit Householder
/// reflections so the result varies continuously with `m`.
///
/// `m` is `k × c` with `c < k` and full column rank; the result is
/// `k × (k − c)`.
pub(crate) fn complement_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (k, c) = m.shape();
    let mut work = m.clone();
    let mut q = DMatrix::<f64>::identity(k, k);
    for j in 0..c {
        let mut v = DVector::<f64>::zeros(k);
        for i in j..k {
            v[i] = work[(i, j)];
        }
        let alpha = v.norm();
        if alpha == 0.0 {
            continue;
        }
        let sign = if v[j] >= 0.0 { 1.0 } else { -1.0 };
        v[j] += sign * alpha;
        let vnorm2 = v.norm_squared();
        if vnorm2 == 0.0 {
            continue;
        }
        // work <- H work, q <- q H with H = I - 2 v vᵀ / vᵀv
        let vt_work = v.transpose() * &work;
        work -= (&v * vt_work) * (2.0 / vnorm2);
        let q_v = &q * &v;
        q -= (q_v * v.transpose()) * (2.0 / vnorm2);
    }
    q.columns(c, k - c).into_owned()
}

/// Flips each column so that its first entry of (near) maximal magnitude
/// is positive. Near-ties are common for antisymmetric eigenvectors.
fn normalize_signs(v: &mut DMatrix<f64>) {
    for mut col in v.column_iter_mut() {
        let max = col.amax();
        let lead = col
            .iter()
            .copied()
            .find(|x| x.abs() >= max * (1.0 - 1e-6))
            .unwrap_or(0.0);
        if lead < 0.0 {
            col.neg_mut();
        }
    }
}

/// Eigenpairs of the symmetric matrix `a` with the `k` largest absolute
/// eigenvalues, ordered by decreasing magnitude. Eigenvector signs are
/// normalized so the output is deterministic.
pub(crate) fn top_abs_eigen(a: &DMatrix<f64>, k: usize) -> (DVector<f64>, DMatrix<f64>) {
    let m = a.nrows();
    assert!(k <= m, "requested {k} eigenpairs of a {m}x{m} matrix");
    if m <= FULL_EIGEN_LIMIT {
        let eig = SymmetricEigen::new(a.clone());
        let (vals, vecs) = select_top(&eig.eigenvalues, &eig.eigenvectors, k);
        return (vals, vecs);
    }
    subspace_iteration(a, k)
}

const FULL_EIGEN_LIMIT: usize = 200;

fn select_top(
    vals: &DVector<f64>,
    vecs: &DMatrix<f64>,
    k: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&i, &j| {
        vals[j]
            .abs()
            .partial_cmp(&vals[i].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut out_vals = DVector::zeros(k);
    let mut out_vecs = DMatrix::zeros(vecs.nrows(), k);
    for (c, &i) in order.iter().take(k).enumerate() {
        out_vals[c] = vals[i];
        out_vecs.set_column(c, &vecs.column(i));
    }
    normalize_signs(&mut out_vecs);
    (out_vals, out_vecs)
}

/// Block subspace iteration with Rayleigh–Ritz extraction. Used for the
/// large kernel matrices where only a handful of dominant eigenpairs are
/// needed.
fn subspace_iteration(a: &DMatrix<f64>, k: usize) -> (DVector<f64>, DMatrix<f64>) {
    let m = a.nrows();
    let block = (2 * k + 8).min(m);
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e11_5eed);
    let mut q = DMatrix::<f64>::from_fn(m, block, |_, _| rng.random::<f64>() - 0.5);
    q = q.qr().q();
    let mut prev: Option<DVector<f64>> = None;
    let scale = a.amax().max(f64::MIN_POSITIVE);
    for _ in 0..500 {
        let y = a * &q;
        q = y.qr().q();
        let h = q.transpose() * a * &q;
        let h = (&h + h.transpose()) * 0.5;
        let eig = SymmetricEigen::new(h);
        let (vals, w) = select_top(&eig.eigenvalues, &eig.eigenvectors, block);
        let top = vals.rows(0, k).into_owned();
        let converged = prev.as_ref().is_some_and(|p| {
            p.iter()
                .zip(top.iter())
                .all(|(a, b)| (a - b).abs() <= 1e-14 * scale.max(b.abs()))
        });
        q = &q * &w;
        if converged {
            let vecs = q.columns(0, k).into_owned();
            let resid = (a * &vecs - &vecs * DMatrix::from_diagonal(&top)).amax();
            if resid <= 1e-9 * scale {
                let mut vecs = vecs;
                normalize_signs(&mut vecs);
                return (top, vecs);
            }
        }
        prev = Some(top);
    }
    // Fall back to the full decomposition if the iteration stalls.
    let eig = SymmetricEigen::new(a.clone());
    select_top(&eig.eigenvalues, &eig.eigenvectors, k)
}

/// Numerical rank from singular values relative to the largest one.
#[cfg(test)]
pub(crate) fn numerical_rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}
