use nalgebra::{DMatrix, DVector};
use nitrate_gamm::basis::{evaluate_smooth, tprs_basis, vif, vif_screen, SmoothSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn uniform(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Least squares of `y` on `[1 | design]`; returns (intercept, coefs).
fn ols(design: &DMatrix<f64>, y: &[f64]) -> (f64, DVector<f64>) {
    let n = design.nrows();
    let p = design.ncols() + 1;
    let x = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { design[(i, j - 1)] });
    let beta = x.svd(true, true).solve(&DVector::from_column_slice(y), 1e-14).unwrap();
    (beta[0], beta.rows(1, p - 1).into_owned())
}

/// `∫ s''(x)² dx` over the knot range by central differences and Simpson's rule.
fn wiggliness(basis: &nitrate_gamm::BasisExpansion, coefs: &DVector<f64>) -> f64 {
    let (lo, hi) = basis.evaluator.range;
    let m = 4000;
    let h = (hi - lo) / m as f64;
    let xs: Vec<f64> = (0..=m + 2).map(|i| lo + (i as f64 - 1.0) * h).collect();
    let s = evaluate_smooth(basis, coefs, &xs, true).unwrap();
    let d2: Vec<f64> = (1..=m + 1)
        .map(|i| (s[i + 1] - 2.0 * s[i] + s[i - 1]) / (h * h))
        .collect();
    let mut acc = 0.0;
    for (i, v) in d2.iter().enumerate() {
        let w = if i == 0 || i == m {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * v * v;
    }
    acc * h / 3.0
}

#[test]
fn penalty_matches_quadrature_of_second_derivative() {
    for seed in 0..5 {
        let x = uniform(50, seed, 0.0, 6.0);
        let b = tprs_basis(&x, &SmoothSpec::new("x")).unwrap();
        let y: Vec<f64> = x.iter().map(|v| v.sin()).collect();
        let (_, coefs) = ols(&b.design, &y);
        let quad = (&coefs.transpose() * &b.penalty * &coefs)[(0, 0)];
        let oracle = wiggliness(&b, &coefs);
        assert!(
            (quad - oracle).abs() <= 0.05 * oracle,
            "seed {seed}: penalty {quad} vs quadrature {oracle}"
        );
    }
}

#[test]
fn linear_target_interpolates_exactly_at_midpoints() {
    let x = uniform(80, 3, -2.0, 5.0);
    let b = tprs_basis(&x, &SmoothSpec::new("x")).unwrap();
    let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
    let (intercept, coefs) = ols(&b.design, &y);
    let mut sorted = x.clone();
    sorted.sort_by(f64::total_cmp);
    let mids: Vec<f64> = sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let s = evaluate_smooth(&b, &coefs, &mids, false).unwrap();
    for (m, v) in mids.iter().zip(&s) {
        assert!((intercept + v - (2.0 * m + 1.0)).abs() < 1e-8);
    }
}

#[test]
fn linear_coefs_reproduce_centred_covariate() {
    let x = uniform(120, 4, 10.0, 30.0);
    let b = tprs_basis(&x, &SmoothSpec::new("x")).unwrap();
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let fitted = &b.design * b.linear_coefs();
    for (f, v) in fitted.iter().zip(&x) {
        assert!((f - (v - mean)).abs() < 1e-9);
    }
    let q = (&b.linear_coefs().transpose() * &b.penalty * b.linear_coefs())[(0, 0)];
    assert!(q.abs() < 1e-8);
}

/// `1 / (1 − R²)` from the raw normal equations with an explicit intercept.
fn vif_oracle(cols: &[Vec<f64>], j: usize) -> f64 {
    let n = cols[0].len();
    let others: Vec<&Vec<f64>> = cols.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, c)| c).collect();
    let p = others.len() + 1;
    let x = DMatrix::from_fn(n, p, |i, c| if c == 0 { 1.0 } else { others[c - 1][i] });
    let y = DVector::from_column_slice(&cols[j]);
    let xtx = x.tr_mul(&x);
    let xty = x.tr_mul(&y);
    let beta = xtx.lu().solve(&xty).unwrap();
    let rss = (&y - &x * beta).norm_squared();
    let mean = y.mean();
    let tss = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    1.0 / (rss / tss)
}

fn correlated(n: usize, rho: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    for _ in 0..n {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let z3: f64 = rng.sample(StandardNormal);
        a.push(3.0 + z1);
        b.push(-1.0 + 2.0 * (rho * z1 + (1.0 - rho * rho).sqrt() * z2));
        c.push(10.0 * z3);
    }
    vec![a, b, c]
}

#[test]
fn vif_matches_normal_equations_oracle() {
    let cols = correlated(10_000, 0.8, 21);
    let named: Vec<(String, Vec<f64>)> = cols.iter().enumerate().map(|(i, c)| (format!("x{i}"), c.clone())).collect();
    let table = vif(&named).unwrap();
    for (j, e) in table.iter().enumerate() {
        let o = vif_oracle(&cols, j);
        assert!((e.vif - o).abs() <= 1e-8 * o, "{}: {} vs {o}", e.name, e.vif);
    }
    assert!((table[0].vif - 1.0 / (1.0 - 0.64)).abs() < 0.1);
}

#[test]
fn duplicated_column_is_infinite_and_serializes_as_null() {
    let a = uniform(200, 5, 0.0, 1.0);
    let b = uniform(200, 6, 0.0, 1.0);
    let cols = vec![("a".to_string(), a.clone()), ("b".to_string(), b), ("a2".to_string(), a)];
    let table = vif(&cols).unwrap();
    assert!(table[0].vif.is_infinite() && table[2].vif.is_infinite());
    assert!(table[1].vif.is_finite());
    let json = serde_json::to_value(&table).unwrap();
    assert!(json[0]["vif"].is_null());
}

#[test]
fn screening_keeps_one_of_a_collinear_pair() {
    let cols = correlated(2000, 0.99, 8);
    let named: Vec<(String, Vec<f64>)> = cols.into_iter().enumerate().map(|(i, c)| (format!("x{i}"), c)).collect();
    let s = vif_screen(&named, 6.0).unwrap();
    assert_eq!(s.excluded.len(), 1);
    assert_eq!(s.retained.len(), 2);
    assert!(s.retained.contains(&"x2".to_string()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn vif_affine_invariance(seed in 0u64..1000, a in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0], b in -100.0f64..100.0, col in 0usize..3) {
        let mut cols = correlated(300, 0.6, seed);
        let named = |cs: &Vec<Vec<f64>>| cs.iter().enumerate().map(|(i, c)| (format!("x{i}"), c.clone())).collect::<Vec<_>>();
        let before = vif(&named(&cols)).unwrap();
        for v in cols[col].iter_mut() {
            *v = a * *v + b;
        }
        let after = vif(&named(&cols)).unwrap();
        for (x, y) in before.iter().zip(&after) {
            prop_assert!((x.vif - y.vif).abs() <= 1e-8 * x.vif);
        }
    }

    #[test]
    fn fitted_smooth_has_zero_mean(seed in 0u64..1000, coefs in prop::collection::vec(-10.0f64..10.0, 6)) {
        let x = uniform(150, seed, -3.0, 8.0);
        let b = tprs_basis(&x, &SmoothSpec::new("x")).unwrap();
        let f = &b.design * DVector::from_vec(coefs);
        let sd = (f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64).sqrt().max(1.0);
        prop_assert!(f.mean().abs() <= 1e-8 * sd);
    }

    #[test]
    fn translation_leaves_basis_unchanged(seed in 0u64..1000, shift in -1e3f64..1e3) {
        let x = uniform(100, seed, 0.0, 5.0);
        let moved: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let b0 = tprs_basis(&x, &SmoothSpec::new("x")).unwrap();
        let b1 = tprs_basis(&moved, &SmoothSpec::new("x")).unwrap();
        prop_assert!((&b0.design - &b1.design).amax() < 1e-8);
        prop_assert!((&b0.penalty - &b1.penalty).amax() < 1e-10 * b0.penalty.amax().max(1.0));
    }

    #[test]
    fn construction_is_deterministic(seed in 0u64..1000, n in 10usize..2500) {
        let x = uniform(n, seed, 0.0, 1.0);
        let spec = SmoothSpec::new("x");
        prop_assert_eq!(tprs_basis(&x, &spec).unwrap(), tprs_basis(&x, &spec).unwrap());
    }

    #[test]
    fn penalty_is_psd_and_columns_sum_to_zero(seed in 0u64..1000, k in 4usize..10) {
        let x = uniform(200, seed, -1.0, 1.0);
        let b = tprs_basis(&x, &SmoothSpec::new("x").with_basis_dim(k)).unwrap();
        prop_assert_eq!(b.design.ncols(), k - 1);
        for c in b.design.column_iter() {
            prop_assert!(c.sum().abs() <= 1e-8 * 200.0);
        }
        let eig = b.penalty.clone().symmetric_eigen().eigenvalues;
        prop_assert!(eig.min() >= -1e-10 * eig.max());
    }
}
