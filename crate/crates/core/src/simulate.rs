//! Synthetic data from the additive-plus-ARMA generative model.
//!
//! Covariates are iid uniform on their ranges, the mean is an intercept
//! plus one smooth effect per active covariate, and the error is a
//! stationary ARMA process scaled so that the mean explains a chosen share
//! of the population variance of the response.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arma::{autocovariances, simulate_arma, ArmaError, ArmaParams};
use crate::ingest::{
    gap_table, unit_for, write_series, AlignedFrame, IngestError, SensorSeries, GRID_STEP_SECS,
    LOG_TURBIDITY, TIME_COLUMN,
};

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("simulate: {0}")]
    Config(String),
    #[error("simulate: {0}")]
    Arma(#[from] ArmaError),
    #[error("simulate: {0}")]
    Ingest(#[from] IngestError),
    #[error("simulate: cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Shape of one covariate's effect on `u ∈ [0, 1]`, the covariate rescaled
/// to its range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Effect {
    None,
    /// `a · sin(2π c u + φ)`.
    Sine { amplitude: f64, cycles: f64, phase: f64 },
    /// `a · (u − 0.5)²`.
    Quadratic { amplitude: f64 },
    /// `a / (1 + exp(−s (u − m)))`.
    Logistic { amplitude: f64, slope: f64, centre: f64 },
    /// `a · u`.
    Linear { amplitude: f64 },
}

impl Effect {
    pub fn eval(&self, u: f64) -> f64 {
        match *self {
            Effect::None => 0.0,
            Effect::Sine { amplitude, cycles, phase } => {
                amplitude * (2.0 * std::f64::consts::PI * cycles * u + phase).sin()
            }
            Effect::Quadratic { amplitude } => amplitude * (u - 0.5) * (u - 0.5),
            Effect::Logistic { amplitude, slope, centre } => {
                amplitude / (1.0 + (-slope * (u - centre)).exp())
            }
            Effect::Linear { amplitude } => amplitude * u,
        }
    }

    pub fn is_active(&self) -> bool {
        !matches!(self, Effect::None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCovariate {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub effect: Effect,
}

impl SimCovariate {
    pub fn new(name: &str, lo: f64, hi: f64, effect: Effect) -> Self {
        Self { name: name.to_string(), lo, hi, effect }
    }

    /// The effect at covariate value `x`.
    pub fn smooth(&self, x: f64) -> f64 {
        self.effect.eval((x - self.lo) / (self.hi - self.lo))
    }

    /// Population variance of the effect under `x ~ U(lo, hi)`, by the
    /// composite midpoint rule.
    pub fn effect_variance(&self) -> f64 {
        const M: usize = 20_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for i in 0..M {
            let v = self.effect.eval((i as f64 + 0.5) / M as f64);
            s += v;
            s2 += v * v;
        }
        let mean = s / M as f64;
        s2 / M as f64 - mean * mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub start: DateTime<Utc>,
    pub intercept: f64,
    pub covariates: Vec<SimCovariate>,
    /// AR and MA coefficients of the error; its variance is set from
    /// `mean_share`.
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    /// Population share of `Var y` carried by the mean.
    pub mean_share: f64,
    /// Lattice rows `[from, to)` dropped from the grid.
    pub gap: Option<(usize, usize)>,
    /// Every `k`-th retained row gets a failed nitrate quality flag.
    pub flag_every: Option<usize>,
    /// Signal-free covariates built mostly from another covariate.
    pub proxies: Vec<Proxy>,
}

/// `u_target ← (1 − w) u_target + w u_source` on the unit scale. The target
/// must carry no effect, so the population partition is unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proxy {
    pub target: String,
    pub source: String,
    pub weight: f64,
}

fn default_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2019, 6, 1, 0, 0, 0).single().expect("valid date")
}

impl SimConfig {
    /// Four active smooths, `temp` dominant, plus two pure-noise covariates
    /// and ARMA(2, 1) errors; the mean carries 80% of the variance.
    pub fn recovery(n: usize) -> Self {
        let mut c = Self::base(n);
        c.covariates.push(SimCovariate::new("noise", 0.0, 1.0, Effect::None));
        c
    }

    /// Water-quality named covariates for the bundled pipeline fixture, with
    /// a gap and sparse quality flags. `log_turbidity` carries no signal.
    pub fn fixture(n: usize) -> Self {
        let mut c = Self::base(n);
        c.gap = Some((n / 2, n / 2 + 24));
        c.flag_every = Some(97);
        c
    }

    /// The fixture with `log_turbidity` tracking `temp` closely.
    pub fn correlated_fixture(n: usize) -> Self {
        let mut c = Self::fixture(n);
        c.proxies.push(Proxy {
            target: LOG_TURBIDITY.to_string(),
            source: "temp".to_string(),
            weight: 0.9,
        });
        c
    }

    fn base(n: usize) -> Self {
        Self {
            n,
            start: default_start(),
            intercept: 30.0,
            covariates: vec![
                SimCovariate::new(
                    "temp",
                    0.0,
                    25.0,
                    Effect::Sine { amplitude: 4.0, cycles: 0.75, phase: 0.0 },
                ),
                SimCovariate::new("cond", 300.0, 600.0, Effect::Quadratic { amplitude: 8.0 }),
                SimCovariate::new(
                    "do",
                    6.0,
                    12.0,
                    Effect::Logistic { amplitude: 1.5, slope: 10.0, centre: 0.5 },
                ),
                SimCovariate::new("elevation", 125.9, 126.7, Effect::Linear { amplitude: -1.5 }),
                SimCovariate::new(LOG_TURBIDITY, 0.0, 4.0, Effect::None),
            ],
            ar: vec![1.2, -0.5],
            ma: vec![0.4],
            mean_share: 0.8,
            gap: None,
            flag_every: None,
            proxies: Vec::new(),
        }
    }

    pub fn active(&self) -> Vec<String> {
        self.covariates
            .iter()
            .filter(|c| c.effect.is_active())
            .map(|c| c.name.clone())
            .collect()
    }

    fn check(&self) -> Result<(), SimulateError> {
        let bad = |m: String| Err(SimulateError::Config(m));
        if self.n < 2 {
            return bad(format!("n = {} is too small", self.n));
        }
        if !(self.mean_share > 0.0 && self.mean_share < 1.0) {
            return bad(format!("mean share {} is outside (0, 1)", self.mean_share));
        }
        for c in &self.covariates {
            if !(c.hi > c.lo) {
                return bad(format!("covariate {} has an empty range", c.name));
            }
            if c.name == TIME_COLUMN {
                return bad(format!("{TIME_COLUMN} is reserved"));
            }
        }
        if let Some((a, b)) = self.gap {
            if a == 0 || b <= a || b >= self.n {
                return bad(format!("gap [{a}, {b}) must lie strictly inside the series"));
            }
        }
        for px in &self.proxies {
            let find = |name: &str| self.covariates.iter().find(|c| c.name == name);
            match (find(&px.target), find(&px.source)) {
                (Some(t), Some(_)) if !t.effect.is_active() && px.target != px.source => {}
                _ => return bad(format!("proxy {} ← {} needs an inactive target and a distinct source", px.target, px.source)),
            }
            if !(0.0..=1.0).contains(&px.weight) {
                return bad(format!("proxy weight {} is outside [0, 1]", px.weight));
            }
        }
        if self.flag_every == Some(0) {
            return bad("flag_every must be positive".into());
        }
        Ok(())
    }
}

/// Population quantities of a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub active: Vec<String>,
    pub arma: ArmaParams,
    pub var_mean: f64,
    pub var_error: f64,
    pub var_y: f64,
    /// `Var f / Var y`.
    pub de_gam: f64,
    /// `1 − σ² / Var y`.
    pub de_total: f64,
    /// `100 (Var η − σ²) / Var y`.
    pub arma_share: f64,
}

impl SimTruth {
    pub fn of(config: &SimConfig) -> Result<Self, SimulateError> {
        config.check()?;
        let var_mean: f64 = config.covariates.iter().map(|c| c.effect_variance()).sum();
        if !(var_mean > 0.0) {
            return Err(SimulateError::Config("no covariate carries signal".into()));
        }
        let unit = ArmaParams { ar: config.ar.clone(), ma: config.ma.clone(), sigma2: 1.0 };
        let gamma0 = autocovariances(&unit, 1)?[0];
        let var_error = var_mean * (1.0 - config.mean_share) / config.mean_share;
        let sigma2 = var_error / gamma0;
        let var_y = var_mean + var_error;
        Ok(Self {
            active: config.active(),
            arma: ArmaParams { sigma2, ..unit },
            var_mean,
            var_error,
            var_y,
            de_gam: var_mean / var_y,
            de_total: 1.0 - sigma2 / var_y,
            arma_share: 100.0 * (var_error - sigma2) / var_y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub config: SimConfig,
    pub truth: SimTruth,
    pub frame: AlignedFrame,
}

impl Simulation {
    /// True effect of `name` at each `x`, shifted so that its mean over the
    /// frame's valid rows is zero (the identifiability constraint of the
    /// fitted smooths).
    pub fn centred_smooth(&self, name: &str, xs: &[f64]) -> Option<Vec<f64>> {
        let cov = self.config.covariates.iter().find(|c| c.name == name)?;
        let sample = self.frame.valid_column(name)?;
        let shift = sample.iter().map(|&x| cov.smooth(x)).sum::<f64>() / sample.len() as f64;
        Some(xs.iter().map(|&x| cov.smooth(x) - shift).collect())
    }
}

/// Draws one data set. Covariates are drawn column by column, then the
/// error, all from one ChaCha8 stream seeded by `seed`.
pub fn simulate(config: &SimConfig, seed: u64) -> Result<Simulation, SimulateError> {
    let truth = SimTruth::of(config)?;
    let n = config.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns: Vec<Vec<f64>> = config
        .covariates
        .iter()
        .map(|c| (0..n).map(|_| rng.random_range(c.lo..c.hi)).collect())
        .collect();
    let index = |name: &str| config.covariates.iter().position(|c| c.name == name).expect("checked");
    for px in &config.proxies {
        let (t, s) = (index(&px.target), index(&px.source));
        let (ct, cs) = (&config.covariates[t], &config.covariates[s]);
        let mixed: Vec<f64> = (0..n)
            .map(|i| {
                let ut = (columns[t][i] - ct.lo) / (ct.hi - ct.lo);
                let us = (columns[s][i] - cs.lo) / (cs.hi - cs.lo);
                ct.lo + ((1.0 - px.weight) * ut + px.weight * us) * (ct.hi - ct.lo)
            })
            .collect();
        columns[t] = mixed;
    }
    let eta = simulate_arma(&truth.arma, n, &mut rng);
    let y: Vec<f64> = (0..n)
        .map(|i| {
            config.intercept
                + config
                    .covariates
                    .iter()
                    .zip(&columns)
                    .map(|(c, col)| c.smooth(col[i]))
                    .sum::<f64>()
                + eta[i]
        })
        .collect();

    let keep: Vec<usize> = match config.gap {
        Some((a, b)) => (0..n).filter(|&i| i < a || i >= b).collect(),
        None => (0..n).collect(),
    };
    let t0 = config.start.timestamp();
    let grid: Vec<DateTime<Utc>> = keep
        .iter()
        .map(|&i| {
            DateTime::from_timestamp(t0 + i as i64 * GRID_STEP_SECS, 0).expect("timestamp in range")
        })
        .collect();
    let valid: Vec<bool> = (0..keep.len())
        .map(|r| config.flag_every.is_none_or(|k| (r + 1) % k != 0))
        .collect();
    let mut covariates: Vec<(String, Vec<f64>)> = config
        .covariates
        .iter()
        .zip(&columns)
        .map(|(c, col)| (c.name.clone(), keep.iter().map(|&i| col[i]).collect()))
        .collect();
    covariates.push((
        TIME_COLUMN.to_string(),
        keep.iter()
            .map(|&i| (i as i64 * GRID_STEP_SECS) as f64 / 86_400.0)
            .collect(),
    ));
    let gaps = gap_table(&grid);
    let frame = AlignedFrame {
        grid,
        response_name: "nitrate".to_string(),
        response: keep.iter().map(|&i| y[i]).collect(),
        covariates,
        valid,
        gaps,
    };
    Ok(Simulation { config: config.clone(), truth, frame })
}

/// Writes the simulation as one canonical CSV per sensor variable.
///
/// `log_turbidity` is written back as raw turbidity. Covariate timestamps
/// lag the grid by 0, 20 or 40 seconds in rotation so that alignment
/// exercises its clock-skew tolerance. Returns the written paths, nitrate
/// first.
pub fn write_fixture(sim: &Simulation, dir: &Path) -> Result<Vec<PathBuf>, SimulateError> {
    fs::create_dir_all(dir).map_err(|source| SimulateError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let (nitrate, others) = sim.frame.to_series();
    let mut paths = Vec::with_capacity(others.len() + 1);
    let path = dir.join("nitrate.csv");
    write_series(&path, &nitrate)?;
    paths.push(path);
    for s in others {
        let (variable, values) = if s.variable == LOG_TURBIDITY {
            ("turbidity".to_string(), s.values.iter().map(|v| v.exp_m1()).collect())
        } else {
            (s.variable.clone(), s.values.clone())
        };
        let timestamps = s
            .timestamps
            .iter()
            .enumerate()
            .map(|(i, t)| *t - chrono::Duration::seconds(20 * (i % 3) as i64))
            .collect();
        let out = SensorSeries::new(
            variable.clone(),
            unit_for(&variable),
            timestamps,
            values,
            s.qc_flags.clone(),
        )?;
        let path = dir.join(format!("{variable}.csv"));
        write_series(&path, &out)?;
        paths.push(path);
    }
    Ok(paths)
}
