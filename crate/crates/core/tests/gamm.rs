use chrono::{Duration, TimeZone, Utc};
use nitrate_gamm::basis::SmoothSpec;
use nitrate_gamm::gamm::{fit_gamm, fit_gamm_fixed, variable_importance, GammOptions};
use nitrate_gamm::simulate::{simulate, SimConfig};
use nitrate_gamm::AlignedFrame;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn frame(y: Vec<f64>, cols: Vec<(&str, Vec<f64>)>) -> AlignedFrame {
    let t0 = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
    AlignedFrame {
        grid: (0..y.len()).map(|i| t0 + Duration::minutes(15 * i as i64)).collect(),
        response_name: "nitrate".into(),
        valid: vec![true; y.len()],
        response: y,
        covariates: cols.into_iter().map(|(n, c)| (n.to_string(), c)).collect(),
        gaps: Vec::new(),
    }
}

fn specs(names: &[&str]) -> Vec<SmoothSpec> {
    names.iter().map(|n| SmoothSpec::new(*n)).collect()
}

fn small_grid() -> GammOptions {
    GammOptions {
        p_max: 2,
        q_max: 2,
        ..GammOptions::default()
    }
}

/// AR(1) errors around one smooth signal, plus one pure-noise covariate.
fn one_signal(seed: u64, n: usize) -> AlignedFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x1: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let x2: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut eta = 0.0;
    let y = x1
        .iter()
        .map(|v| {
            let e: f64 = rng.sample(StandardNormal);
            eta = 0.7 * eta + 0.4 * e;
            2.0 * (6.0 * v).sin() + eta
        })
        .collect();
    frame(y, vec![("signal", x1), ("noise", x2)])
}

#[test]
fn iid_noise_explains_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 2000;
    let cols: Vec<(&str, Vec<f64>)> = ["a", "b"]
        .iter()
        .map(|c| (*c, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()))
        .collect();
    let y = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let f = frame(y, cols);
    let m = fit_gamm(&f, &specs(&["a", "b"]), &GammOptions::default()).unwrap();
    assert!(m.de_total <= 0.03, "de_total {}", m.de_total);
    let white = m.order_cells.iter().find(|c| c.p == 0 && c.q == 0).unwrap();
    assert!(white.aic.is_some_and(|a| a - m.arma.aic < 2.0 * (m.arma.p + m.arma.q) as f64 + 1e-9));
}

#[test]
fn simulated_two_step_model_explains_most_deviance() {
    let sim = simulate(&SimConfig::fixture(5000), 3).unwrap();
    let names = ["temp", "cond", "do", "elevation", "log_turbidity"];
    let m = fit_gamm(&sim.frame, &specs(&names), &GammOptions::default()).unwrap();
    assert!(m.de_total >= 0.95, "de_total {}", m.de_total);
    assert!(m.de_total >= m.de_gam - 1e-8);
    assert!(m.aaic_gamm < m.aaic_gam);
    assert!((m.de_arma - (m.de_total - m.de_gam)).abs() < 1e-15);
    assert!((m.k_gamm - m.k_gam - (m.arma.p + m.arma.q + 1) as f64).abs() < 1e-12);
}

#[test]
fn too_few_rows_is_a_data_error() {
    let f = one_signal(1, 200);
    let err = fit_gamm(&f, &specs(&["signal"]), &GammOptions::default()).unwrap_err();
    assert!(err.to_string().contains("200"));
}

#[test]
fn noise_covariate_has_negligible_importance() {
    for seed in 0..5 {
        let f = one_signal(seed, 1500);
        let opts = small_grid();
        let m = fit_gamm_fixed(&f, &specs(&["signal", "noise"]), &opts).unwrap();
        let imp = variable_importance(&m, &f, &opts).unwrap();
        let noise = imp.importance("noise").unwrap();
        assert!(noise <= 1.0, "seed {seed}: noise importance {noise}");
        assert!(noise >= -0.5);
    }
}

#[test]
fn only_active_covariate_ranks_first() {
    let opts = small_grid();
    let first = (0..20)
        .filter(|&seed| {
            let f = one_signal(200 + seed, 800);
            let m = fit_gamm_fixed(&f, &specs(&["signal", "noise"]), &opts).unwrap();
            let imp = variable_importance(&m, &f, &opts).unwrap();
            imp.ranking[0] == "signal"
        })
        .count();
    assert!(first >= 18, "signal ranked first in {first}/20 seeds");
}

#[test]
fn importance_is_deterministic() {
    let f = one_signal(9, 1000);
    let opts = small_grid();
    let run = || {
        let m = fit_gamm_fixed(&f, &specs(&["signal", "noise"]), &opts).unwrap();
        serde_json::to_string(&variable_importance(&m, &f, &opts).unwrap()).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn importance_needs_two_covariates() {
    let f = one_signal(2, 800);
    let opts = small_grid();
    let m = fit_gamm_fixed(&f, &specs(&["signal"]), &opts).unwrap();
    assert!(variable_importance(&m, &f, &opts).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn arma_step_never_loses_deviance(seed in 0u64..10_000) {
        let f = one_signal(seed, 600);
        let opts = GammOptions { p_max: 1, q_max: 1, ..GammOptions::default() };
        let m = fit_gamm(&f, &specs(&["signal", "noise"]), &opts).unwrap();
        prop_assert!(m.de_total >= m.de_gam - 1e-8);
        prop_assert!((0.0..=1.0).contains(&m.de_total));
    }
}
