//! Acceptance run: prints one PASS/FAIL/SKIPPED line per criterion.
//!
//! Exits 0 so the workspace test run reports failing criteria without
//! stopping; set `ACCEPTANCE_STRICT=1` to exit 1 when any criterion fails.
//! Criterion 7 runs only when `NITRATE_GAMM_NEON_EXTRACTS` points at a
//! directory holding one config per site (`<SITE>/config.toml`).

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use nitrate_gamm::arma::transform::to_params;
use nitrate_gamm::arma::{arma_loglik, simulate_arma, ArmaParams};
use nitrate_gamm::basis::{vif, SmoothSpec};
use nitrate_gamm::gam::{fit_with_lambdas, smooth_se, GamData, GamFit};
use nitrate_gamm::gamm::{fit_gamm, variable_importance, GammModel, GammOptions, ImportanceReport};
use nitrate_gamm::pipeline::{run, RunConfig};
use nitrate_gamm::simulate::{simulate, SimConfig, Simulation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SEEDS: std::ops::RangeInclusive<u64> = 1..=20;
const RECOVERY_N: usize = 10_000;
const COVERAGE_POINTS: usize = 50;

#[derive(Clone, Copy, PartialEq)]
enum Outcome {
    Pass,
    Fail,
    Skipped,
}

struct Line {
    id: u32,
    name: &'static str,
    outcome: Outcome,
    detail: String,
}

impl Line {
    fn new(id: u32, name: &'static str, ok: bool, detail: String) -> Self {
        let outcome = if ok { Outcome::Pass } else { Outcome::Fail };
        Self { id, name, outcome, detail }
    }

    fn print(&self) {
        let tag = match self.outcome {
            Outcome::Pass => "PASS",
            Outcome::Fail => "FAIL",
            Outcome::Skipped => "SKIPPED",
        };
        println!("{tag} {}. {}: {}", self.id, self.name, self.detail);
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

// ---------------------------------------------------------------- 1

fn gam_instance(rng: &mut ChaCha8Rng) -> (GamData, Vec<String>, Vec<f64>) {
    let n = rng.random_range(40..=200);
    let n_terms = rng.random_range(1..=3);
    let mut y: Vec<f64> = (0..n).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut cols = Vec::new();
    for j in 0..n_terms {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        for (yi, xi) in y.iter_mut().zip(&x) {
            *yi += (xi * (j + 1) as f64 * 0.7).cos();
        }
        cols.push((SmoothSpec::new(format!("x{j}")), x));
    }
    let names = cols.iter().map(|(s, _)| s.covariate.clone()).collect();
    let lambdas = (0..n_terms).map(|_| 10f64.powf(rng.random_range(-4.0..4.0))).collect();
    (GamData::from_columns(y, cols).unwrap(), names, lambdas)
}

/// `(XᵀX + blockdiag(λS)) β = Xᵀy` assembled densely and solved by LU.
fn normal_equations(d: &GamData, names: &[String], lambdas: &[f64]) -> DVector<f64> {
    let n = d.n();
    let bases: Vec<_> = names.iter().map(|t| d.basis(t).unwrap()).collect();
    let p = 1 + bases.iter().map(|b| b.design.ncols()).sum::<usize>();
    let mut x = DMatrix::zeros(n, p);
    let mut a = DMatrix::zeros(p, p);
    x.column_mut(0).fill(1.0);
    let mut off = 1;
    for (b, &lam) in bases.iter().zip(lambdas) {
        let k = b.design.ncols();
        x.view_mut((0, off), (n, k)).copy_from(&b.design);
        a.view_mut((off, off), (k, k)).copy_from(&(&b.penalty * lam));
        off += k;
    }
    a += x.tr_mul(&x);
    a.lu().solve(&x.tr_mul(&d.y)).unwrap()
}

fn stacked(fit: &GamFit) -> DVector<f64> {
    let mut v = vec![fit.intercept];
    for t in &fit.terms {
        v.extend(t.coefficients.iter());
    }
    DVector::from_vec(v)
}

fn criterion_1() -> Line {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst = 0.0f64;
    let mut ok = 0;
    for _ in 0..50 {
        let (d, names, lambdas) = gam_instance(&mut rng);
        let fit = fit_with_lambdas(&d, &names, &lambdas).unwrap();
        let diff = (stacked(&fit) - normal_equations(&d, &names, &lambdas)).amax();
        worst = worst.max(diff);
        if diff < 1e-8 {
            ok += 1;
        }
    }
    let el = t.elapsed();
    Line::new(
        1,
        "penalized-fit oracle",
        ok == 50 && el < Duration::from_secs(10),
        format!("{ok}/50 within 1e-8 (max diff {worst:.2e}), {}", secs(el)),
    )
}

// ---------------------------------------------------------------- 2

/// Autocovariances from the MA(∞) weights, truncated once negligible.
fn psi_autocov(params: &ArmaParams, lags: usize) -> Vec<f64> {
    let (ar, ma) = (&params.ar, &params.ma);
    let mut psi = vec![1.0];
    while psi.len() < lags + 20_000 {
        let j = psi.len();
        let mut v = if j <= ma.len() { ma[j - 1] } else { 0.0 };
        for i in 1..=ar.len().min(j) {
            v += ar[i - 1] * psi[j - i];
        }
        psi.push(v);
        if j > lags + 10 && psi[j - 3..].iter().all(|x| x.abs() < 1e-18) {
            break;
        }
    }
    (0..lags)
        .map(|h| params.sigma2 * (0..psi.len() - h).map(|j| psi[j] * psi[j + h]).sum::<f64>())
        .collect()
}

fn mvn_loglik(series: &[Option<f64>], gamma: &[f64]) -> f64 {
    let idx: Vec<usize> = (0..series.len()).filter(|&i| series[i].is_some()).collect();
    let n = idx.len();
    let cov = DMatrix::from_fn(n, n, |a, b| gamma[idx[a].abs_diff(idx[b])]);
    let y = DVector::from_iterator(n, idx.iter().map(|&i| series[i].unwrap()));
    let l = cov.cholesky().expect("positive definite").l();
    let logdet: f64 = (0..n).map(|i| 2.0 * l[(i, i)].ln()).sum();
    let z = l.solve_lower_triangular(&y).unwrap();
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + z.norm_squared())
}

fn criterion_2() -> Line {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let mut worst = 0.0f64;
    let mut ok = 0;
    for _ in 0..50 {
        let p = rng.random_range(0..=2);
        let q = rng.random_range(0..=2);
        let n = rng.random_range(16..=64);
        let theta: Vec<f64> = (0..p + q).map(|_| rng.random_range(-1.5..1.5)).collect();
        let (ar, ma) = to_params(&theta, p, q);
        let params = ArmaParams { ar, ma, sigma2: rng.random_range(0.1..4.0) };
        let mut series: Vec<Option<f64>> = simulate_arma(&params, n, &mut rng).into_iter().map(Some).collect();
        let g = rng.random_range(1..=4);
        let start = rng.random_range(1..n - g - 1);
        series[start..start + g].iter_mut().for_each(|v| *v = None);
        for _ in 0..2 {
            let i = rng.random_range(0..n);
            series[i] = None;
        }
        let kalman = arma_loglik(&series, &params).unwrap();
        let dense = mvn_loglik(&series, &psi_autocov(&params, n));
        let rel = (kalman - dense).abs() / dense.abs();
        worst = worst.max(rel);
        if rel <= 1e-6 {
            ok += 1;
        }
    }
    let el = t.elapsed();
    Line::new(
        2,
        "ARMA likelihood oracle",
        ok == 50 && el < Duration::from_secs(30),
        format!("{ok}/50 within 1e-6 relative (max {worst:.2e}), {}", secs(el)),
    )
}

// ---------------------------------------------------------------- 3

/// `1 / (1 − R²)` from the raw normal equations with an intercept column.
fn brute_vif(cols: &[Vec<f64>], j: usize) -> f64 {
    let n = cols[0].len();
    let others: Vec<&Vec<f64>> = cols.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, c)| c).collect();
    let x = DMatrix::from_fn(n, others.len() + 1, |i, c| if c == 0 { 1.0 } else { others[c - 1][i] });
    let y = DVector::from_column_slice(&cols[j]);
    let beta = x.tr_mul(&x).lu().solve(&x.tr_mul(&y)).unwrap();
    let rss = (&y - &x * beta).norm_squared();
    let mean = y.mean();
    let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    tss / rss
}

fn criterion_3() -> Line {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3003);
    let mut worst = 0.0f64;
    let mut ok = 0;
    let designs = 30;
    for _ in 0..designs {
        let p = rng.random_range(2..=5);
        let n = rng.random_range(50..=2000);
        let mix = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        let cols: Vec<Vec<f64>> = {
            let z = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = z * mix;
            x.column_iter().map(|c| c.iter().map(|v| 5.0 + 3.0 * v).collect()).collect()
        };
        let named: Vec<(String, Vec<f64>)> = cols.iter().enumerate().map(|(i, c)| (format!("c{i}"), c.clone())).collect();
        let table = vif(&named).unwrap();
        let all = table.iter().enumerate().all(|(j, e)| {
            let o = brute_vif(&cols, j);
            let rel = (e.vif - o).abs() / o;
            worst = worst.max(rel);
            rel <= 1e-8
        });
        if all {
            ok += 1;
        }
    }
    let a: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..1.0)).collect();
    let b: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..1.0)).collect();
    let dup = vif(&[("a".into(), a.clone()), ("b".into(), b), ("a_copy".into(), a)]).unwrap();
    let sentinel = dup[0].vif.is_infinite() && dup[2].vif.is_infinite() && serde_json::to_value(&dup[0]).unwrap()["vif"].is_null();
    let el = t.elapsed();
    Line::new(
        3,
        "VIF oracle",
        ok == designs && sentinel && el < Duration::from_secs(5),
        format!(
            "{ok}/{designs} designs within 1e-8 relative (max {worst:.2e}); duplicated column {}; {}",
            if sentinel { "infinite (null in JSON)" } else { "finite" },
            secs(el)
        ),
    )
}

// ---------------------------------------------------------------- 4-6

struct SeedResult {
    seed: u64,
    sim: Simulation,
    model: GammModel,
    importance: Option<ImportanceReport>,
    covered: usize,
    points: usize,
}

fn recovery_candidates(sim: &Simulation) -> Vec<SmoothSpec> {
    sim.config.covariates.iter().map(|c| SmoothSpec::new(c.name.as_str())).collect()
}

fn coverage(sim: &Simulation, model: &GammModel) -> (usize, usize) {
    let mut covered = 0;
    let mut points = 0;
    for name in &sim.truth.active {
        let Some((_, term)) = model.gam.term(name) else { continue };
        let (lo, hi) = term.basis.evaluator.range;
        let xs: Vec<f64> = (0..COVERAGE_POINTS)
            .map(|i| if i + 1 == COVERAGE_POINTS { hi } else { lo + (hi - lo) * i as f64 / (COVERAGE_POINTS - 1) as f64 })
            .collect();
        let est = smooth_se(&model.gam, name, &xs, false).unwrap();
        let truth = sim.centred_smooth(name, &xs).unwrap();
        for (p, t) in est.iter().zip(&truth) {
            points += 1;
            if (p.estimate - t).abs() <= 1.96 * p.se {
                covered += 1;
            }
        }
    }
    (covered, points)
}

/// Returns the per-seed results, the time spent simulating and fitting, and
/// the time spent on importance refits.
fn recovery_runs() -> (Vec<SeedResult>, Duration, Duration) {
    let opts = GammOptions::default();
    let mut fit_time = Duration::ZERO;
    let mut importance_time = Duration::ZERO;
    let results = SEEDS
        .map(|seed| {
            let t = Instant::now();
            let sim = simulate(&SimConfig::recovery(RECOVERY_N), seed).unwrap();
            let model = fit_gamm(&sim.frame, &recovery_candidates(&sim), &opts).unwrap();
            fit_time += t.elapsed();
            let t = Instant::now();
            let importance = (model.gam.terms.len() >= 2).then(|| variable_importance(&model, &sim.frame, &opts).unwrap());
            importance_time += t.elapsed();
            let (covered, points) = coverage(&sim, &model);
            eprintln!(
                "  seed {seed:2}: {:?} ARMA({},{}) de_gam {:.4} de_total {:.4} aAIC {:.0} vs {:.0}",
                model.covariates(),
                model.arma.p,
                model.arma.q,
                model.de_gam,
                model.de_total,
                model.aaic_gamm,
                model.aaic_gam
            );
            SeedResult { seed, sim, model, importance, covered, points }
        })
        .collect();
    (results, fit_time, importance_time)
}

fn sorted(mut v: Vec<String>) -> Vec<String> {
    v.sort();
    v
}

fn criterion_4(rs: &[SeedResult], el: Duration) -> Line {
    let exact = rs.iter().filter(|r| sorted(r.model.covariates()) == sorted(r.sim.truth.active.clone())).count();
    let order = rs.iter().filter(|r| r.model.arma.order() == (2, 1)).count();
    let de_min = rs.iter().map(|r| r.model.de_total).fold(f64::INFINITY, f64::min);
    let de_ok = rs.iter().all(|r| r.model.de_total >= 0.95);
    let covered: usize = rs.iter().map(|r| r.covered).sum();
    let points: usize = rs.iter().map(|r| r.points).sum();
    let cov = covered as f64 / points.max(1) as f64;
    let ok = exact >= 18 && order >= 14 && de_ok && (0.90..=0.98).contains(&cov) && el < Duration::from_secs(600);
    let orders: Vec<String> = rs.iter().map(|r| format!("{}:({},{})", r.seed, r.model.arma.p, r.model.arma.q)).collect();
    Line::new(
        4,
        "synthetic recovery",
        ok,
        format!(
            "exact active set {exact}/20 (need 18); ARMA(2,1) {order}/20 (need 14) [{}]; min de_total {de_min:.4} (need 0.95 in all); band coverage {:.1}% of {points} points (need 90-98%); {}",
            orders.join(" "),
            100.0 * cov,
            secs(el)
        ),
    )
}

fn criterion_5(rs: &[SeedResult]) -> Line {
    let better = rs.iter().filter(|r| r.model.aaic_gamm < r.model.aaic_gam).count();
    Line::new(5, "aAIC ordering", better >= 19, format!("GAMM below GAM in {better}/20 seeds (need 19)"))
}

fn criterion_6(rs: &[SeedResult], el: Duration) -> Line {
    let mut noise_max = f64::NEG_INFINITY;
    let mut first = 0;
    let mut share_dev = 0.0f64;
    let mut missing = 0;
    for r in rs {
        let Some(imp) = &r.importance else {
            missing += 1;
            continue;
        };
        for c in &r.sim.config.covariates {
            if !c.effect.is_active() {
                if let Some(v) = imp.importance(&c.name) {
                    noise_max = noise_max.max(v);
                }
            }
        }
        let dominant = r
            .sim
            .config
            .covariates
            .iter()
            .max_by(|a, b| a.effect_variance().total_cmp(&b.effect_variance()))
            .unwrap();
        if imp.ranking.first() == Some(&dominant.name) {
            first += 1;
        }
        share_dev = share_dev.max((imp.arma_share - r.sim.truth.arma_share).abs());
    }
    let noise_ok = noise_max <= 1.0;
    let ok = missing == 0 && noise_ok && first >= 18 && share_dev <= 5.0;
    let noise = if noise_max.is_finite() {
        format!("{noise_max:.3} pp")
    } else {
        "never selected".into()
    };
    Line::new(
        6,
        "importance sanity",
        ok,
        format!(
            "max noise importance {noise} (need <= 1); dominant first in {first}/20 (need 18); max |ARMA share - oracle| {share_dev:.2} pp (need <= 5, oracle {:.2} pp); {}",
            rs[0].sim.truth.arma_share,
            secs(el)
        ),
    )
}

// ---------------------------------------------------------------- 7

const PAPER_DE_GAM: [(&str, f64); 3] = [("ARIK", 0.74), ("CARI", 0.92), ("LEWI", 0.83)];

fn criterion_7() -> Line {
    let name = "NEON reproduction (advisory)";
    let Some(root) = std::env::var_os("NITRATE_GAMM_NEON_EXTRACTS").map(PathBuf::from) else {
        return Line {
            id: 7,
            name,
            outcome: Outcome::Skipped,
            detail: "NITRATE_GAMM_NEON_EXTRACTS not set; no release extracts supplied".into(),
        };
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for (site, de_gam_paper) in PAPER_DE_GAM {
        let cfg_path = root.join(site).join("config.toml");
        let t = Instant::now();
        let result = RunConfig::load(&cfg_path, std::env::vars()).and_then(|cfg| run(&cfg));
        let el = t.elapsed();
        match result {
            Ok(out) => {
                let m = &out.model;
                let all_six = m.gam.terms.len() == 6;
                let site_ok = el <= Duration::from_secs(900)
                    && (m.de_gam - de_gam_paper).abs() <= 0.08
                    && m.de_total >= 0.95
                    && all_six;
                ok &= site_ok;
                parts.push(format!(
                    "{site}: de_gam {:.3} (paper {de_gam_paper:.2}) de_total {:.3} terms {} {}",
                    m.de_gam,
                    m.de_total,
                    m.gam.terms.len(),
                    secs(el)
                ));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("{site}: {e}"));
            }
        }
    }
    Line::new(7, name, ok, parts.join("; "))
}

// ---------------------------------------------------------------- 8

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synthetic")
}

fn pipeline_files(out: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>, String> {
    let cfg_path = fixture_dir().join("config.toml");
    let env = vec![("GAMM__OUTPUT__DIR".to_string(), out.to_string_lossy().into_owned())];
    let cfg = RunConfig::load(&cfg_path, env).map_err(|e| e.to_string())?;
    let result = run(&cfg).map_err(|e| e.to_string())?;
    result
        .files
        .iter()
        .map(|f| {
            let rel = f.strip_prefix(out).map_err(|e| e.to_string())?.to_path_buf();
            std::fs::read(f).map(|b| (rel, b)).map_err(|e| e.to_string())
        })
        .collect()
}

fn criterion_8() -> Line {
    let t = Instant::now();
    let dir = tempfile::tempdir().expect("temporary directory");
    let a = pipeline_files(&dir.path().join("a"));
    let b = pipeline_files(&dir.path().join("b"));
    let el = t.elapsed();
    match (a, b) {
        (Ok(a), Ok(b)) => {
            let same = a == b;
            let svgs = a.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "svg")).count();
            Line::new(
                8,
                "determinism",
                same,
                format!(
                    "report.json and {svgs} SVGs {} across two runs, {}",
                    if same { "byte-identical" } else { "differ" },
                    secs(el)
                ),
            )
        }
        (Err(e), _) | (_, Err(e)) => Line::new(8, "determinism", false, format!("pipeline failed: {e}")),
    }
}

fn main() {
    // Respect a name filter so `cargo test <name>` does not trigger the full run.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if args.iter().any(|a| !"acceptance".contains(a.as_str())) {
        return;
    }
    let mut lines = vec![criterion_1(), criterion_2(), criterion_3()];
    let (rs, fit_time, importance_time) = recovery_runs();
    lines.push(criterion_4(&rs, fit_time));
    lines.push(criterion_5(&rs));
    lines.push(criterion_6(&rs, importance_time));
    lines.push(criterion_7());
    lines.push(criterion_8());
    println!();
    for l in &lines {
        l.print();
    }
    let failed = lines.iter().filter(|l| l.outcome == Outcome::Fail).count();
    println!("{failed} criteria failed");
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
