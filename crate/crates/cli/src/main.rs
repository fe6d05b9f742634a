use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nitrate_gamm::arma::{ArmaOptions, GapMode};
use nitrate_gamm::basis::{SmoothSpec, DEFAULT_BASIS_DIM};
use nitrate_gamm::gam::{select_lambdas, stepwise_select, GamData};
use nitrate_gamm::gamm::{fit_gamm, variable_importance, GammOptions, DEFAULT_MIN_ROWS};
use nitrate_gamm::ingest::{
    align, load_frame, load_series, save_frame, summarize, unit_for, AlignedFrame, SeriesSchema,
    DEFAULT_TOLERANCE_SECS,
};
use nitrate_gamm::neon::{extract, month_range, NeonClient, ProductRequest, DEFAULT_RELEASE};
use nitrate_gamm::pipeline::{self, FailureKind, PipelineError, RunConfig, DEFAULT_VIF_THRESHOLD};
use nitrate_gamm::plot::{plot_report, write_diel};
use nitrate_gamm::report::{build_report, from_json, to_json, GamSection, RunInfo};
use nitrate_gamm::simulate::{simulate, write_fixture, SimConfig};

#[derive(Parser)]
#[command(name = "nitrate-gamm", version, about = "Two-step GAM + ARMA models of stream nitrate")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log filter, e.g. `info` or `nitrate_gamm=debug`.
    #[arg(long, global = true, env = "NITRATE_GAMM_LOG", default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download NEON data product files and extract sensor CSVs.
    Fetch(FetchArgs),
    /// Align per-variable sensor CSVs onto the 15-minute nitrate grid.
    Ingest(IngestArgs),
    /// Box-plot statistics of an aligned frame.
    Summarize(FrameArg),
    /// Variance inflation factors with iterative screening.
    Vif(VifArgs),
    /// Fit the additive model alone.
    FitGam(ModelArgs),
    /// Fit the two-step model and write its report.
    FitGamm(ModelArgs),
    /// Fit the two-step model and add variable importance to the report.
    Importance(ModelArgs),
    /// Render SVG figures from a report.
    Plot(PlotArgs),
    /// Run every stage from a configuration file.
    Pipeline(PipelineArgs),
    /// Write a synthetic data set in the sensor CSV layout.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct FetchArgs {
    /// NEON product id, e.g. DP1.20033.001.
    #[arg(long)]
    product: String,
    /// Four-letter site code, e.g. ARIK.
    #[arg(long)]
    site: String,
    /// Months as `YYYY-MM`, comma separated, or a range `YYYY-MM..YYYY-MM`.
    #[arg(long)]
    months: String,
    #[arg(long)]
    dest: PathBuf,
    /// Release tag; `none` requests the latest data.
    #[arg(long, default_value = DEFAULT_RELEASE)]
    release: String,
    /// Allow requests to the public NEON API.
    #[arg(long)]
    live: bool,
    /// Also extract canonical per-variable CSVs into this directory.
    #[arg(long)]
    extract: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    /// Directory of `<variable>.csv` files (nitrate plus covariates).
    #[arg(long, conflicts_with = "file")]
    input_dir: Option<PathBuf>,
    /// Explicit `variable=path` inputs; repeatable.
    #[arg(long, value_parser = parse_pair)]
    file: Vec<(String, PathBuf)>,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE_SECS)]
    tolerance_secs: i64,
    /// Output wide CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FrameArg {
    /// Aligned frame written by `ingest`.
    #[arg(long)]
    frame: PathBuf,
}

#[derive(Args)]
struct VifArgs {
    #[arg(long)]
    frame: PathBuf,
    /// Comma-separated covariates (default: all).
    #[arg(long, value_delimiter = ',')]
    candidates: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_VIF_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    frame: PathBuf,
    /// Comma-separated covariates (default: all).
    #[arg(long, value_delimiter = ',')]
    candidates: Vec<String>,
    /// Fit exactly the candidates instead of stepwise selection.
    #[arg(long)]
    no_stepwise: bool,
    #[arg(long, default_value_t = DEFAULT_BASIS_DIM)]
    basis_dim: usize,
    #[arg(long, default_value_t = 5)]
    p_max: usize,
    #[arg(long, default_value_t = 5)]
    q_max: usize,
    #[arg(long, value_enum, default_value_t = GapArg::Kalman)]
    gap_mode: GapArg,
    #[arg(long, default_value_t = DEFAULT_MIN_ROWS)]
    min_rows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "site")]
    site: String,
    /// Output JSON (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GapArg {
    Kalman,
    Segmented,
    Concatenate,
}

impl From<GapArg> for GapMode {
    fn from(g: GapArg) -> Self {
        match g {
            GapArg::Kalman => GapMode::Kalman,
            GapArg::Segmented => GapMode::Segmented,
            GapArg::Concatenate => GapMode::Concatenate,
        }
    }
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Aligned frame for the diel figure.
    #[arg(long)]
    frame: Option<PathBuf>,
    /// Start of the diel window (RFC 3339); default: first grid instant.
    #[arg(long)]
    diel_start: Option<DateTime<Utc>>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimKind {
    /// Five named covariates with a gap and sparse flags.
    Fixture,
    /// The fixture with a near-duplicate covariate.
    Correlated,
    /// Four active and two noise covariates.
    Recovery,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 5000)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SimKind::Fixture)]
    kind: SimKind,
    #[arg(long)]
    out: PathBuf,
}

fn parse_pair(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected variable=path, got `{s}`"))?;
    Ok((k.to_string(), PathBuf::from(v)))
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(stage: &'static str, path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::new(stage, FailureKind::Io, format!("{}: {e}", path.display()))
}

fn data_err(stage: &'static str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::new(stage, FailureKind::Data, e.to_string())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| io_err("output", p, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| io_err("output", Path::new("<stdout>"), e)),
    }
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| data_err("output", e))?;
    s.push('\n');
    Ok(s)
}

fn read_frame(path: &Path) -> Result<AlignedFrame> {
    load_frame(path).map_err(|e| {
        let kind = match e {
            nitrate_gamm::ingest::IngestError::Io { .. } => FailureKind::Io,
            _ => FailureKind::Data,
        };
        PipelineError::new("ingest", kind, e.to_string())
    })
}

fn resolve_candidates(frame: &AlignedFrame, given: &[String]) -> Result<Vec<String>> {
    if given.is_empty() {
        return Ok(frame.covariate_names());
    }
    for c in given {
        if frame.covariate(c).is_none() {
            return Err(data_err("config", format!("candidate `{c}` is not in the frame")));
        }
    }
    Ok(given.to_vec())
}

fn cmd_fetch(a: FetchArgs) -> Result<()> {
    let months = match a.months.split_once("..") {
        Some((from, to)) => month_range(from, to),
        None => Ok(a.months.split(',').map(|m| m.trim().to_string()).collect()),
    }
    .map_err(|e| data_err("fetch", e))?;
    let req = ProductRequest {
        product_id: a.product.clone(),
        site_code: a.site,
        months,
        release_tag: (a.release != "none").then_some(a.release),
    };
    req.validate().map_err(|e| data_err("fetch", e))?;
    let client = NeonClient::from_env(a.live).map_err(|e| data_err("fetch", e))?;
    let report = client
        .fetch(&req, &a.dest)
        .map_err(|e| PipelineError::new("fetch", FailureKind::Io, e.to_string()))?;
    eprintln!(
        "fetched {} files ({} downloaded, {} cached, {} bytes)",
        report.paths.len(),
        report.downloaded,
        report.cached,
        report.bytes_transferred
    );
    if let Some(dir) = a.extract {
        let written = extract(&a.product, &report.paths, &dir).map_err(|e| data_err("extract", e))?;
        for p in written {
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let mut inputs: Vec<(String, PathBuf)> = match &a.input_dir {
        Some(dir) => std::iter::once("nitrate")
            .chain(pipeline::DEFAULT_VARIABLES)
            .map(|v| (v.to_string(), dir.join(format!("{v}.csv"))))
            .collect(),
        None => a.file.clone(),
    };
    inputs.sort_by_key(|(v, _)| (v != "nitrate", v.clone()));
    if inputs.first().is_none_or(|(v, _)| v != "nitrate") {
        return Err(data_err("ingest", "a nitrate input is required"));
    }
    let mut series = Vec::new();
    for (variable, path) in &inputs {
        let (s, _) = load_series(path, &SeriesSchema::canonical(variable.as_str(), unit_for(variable))).map_err(|e| {
            let kind = match e {
                nitrate_gamm::ingest::IngestError::Io { .. } => FailureKind::Io,
                _ => FailureKind::Data,
            };
            PipelineError::new("ingest", kind, e.to_string())
        })?;
        series.push(s);
    }
    let nitrate = series.remove(0);
    let frame = align(&nitrate, &series, a.tolerance_secs).map_err(|e| data_err("ingest", e))?;
    save_frame(&frame, &a.out).map_err(|e| io_err("ingest", &a.out, e))?;
    eprintln!("{} grid rows, {} valid, {} gaps", frame.len(), frame.n_valid(), frame.gaps.len());
    Ok(())
}

fn cmd_summarize(a: FrameArg) -> Result<()> {
    let frame = read_frame(&a.frame)?;
    let s = summarize(&frame).map_err(|e| data_err("summarize", e))?;
    emit(None, &json(&s)?)
}

fn cmd_vif(a: VifArgs) -> Result<()> {
    let frame = read_frame(&a.frame)?;
    let names = resolve_candidates(&frame, &a.candidates)?;
    if !(a.threshold > 0.0) {
        return Err(data_err("config", "VIF threshold must be positive"));
    }
    let screen = pipeline::screen(&frame, &names, a.threshold)?
        .ok_or_else(|| data_err("vif", "VIF needs at least two covariates"))?;
    emit(None, &json(&screen)?)
}

fn options(a: &ModelArgs) -> GammOptions {
    GammOptions {
        min_rows: a.min_rows,
        p_max: a.p_max,
        q_max: a.q_max,
        arma: ArmaOptions {
            gap_mode: a.gap_mode.into(),
            seed: a.seed,
            ..ArmaOptions::default()
        },
    }
}

fn fit_error(e: nitrate_gamm::gamm::GammError) -> PipelineError {
    use nitrate_gamm::gamm::GammError;
    let kind = match e {
        GammError::TooFewRows { .. } | GammError::TooFewCovariates(_) => FailureKind::Data,
        _ => FailureKind::Fit,
    };
    PipelineError::new("fit", kind, e.to_string())
}

fn cmd_fit_gam(a: ModelArgs) -> Result<()> {
    let frame = read_frame(&a.frame)?;
    let names = resolve_candidates(&frame, &a.candidates)?;
    let specs: Vec<SmoothSpec> = names
        .iter()
        .map(|c| SmoothSpec::new(c.as_str()).with_basis_dim(a.basis_dim))
        .collect();
    let data = GamData::from_frame(&frame, &specs).map_err(|e| fit_error(e.into()))?;
    let (fit, path) = if a.no_stepwise {
        (select_lambdas(&data, &names).map_err(|e| fit_error(e.into()))?, Vec::new())
    } else {
        let r = stepwise_select(&data, &names).map_err(|e| fit_error(e.into()))?;
        (r.fit, r.path)
    };
    emit(a.out.as_deref(), &json(&GamSection::of(&fit, &path))?)
}

fn cmd_fit_gamm(a: ModelArgs, with_importance: bool) -> Result<()> {
    let frame = read_frame(&a.frame)?;
    let names = resolve_candidates(&frame, &a.candidates)?;
    let specs: Vec<SmoothSpec> = names
        .iter()
        .map(|c| SmoothSpec::new(c.as_str()).with_basis_dim(a.basis_dim))
        .collect();
    let opts = options(&a);
    let model = if a.no_stepwise {
        nitrate_gamm::gamm::fit_gamm_fixed(&frame, &specs, &opts)
    } else {
        fit_gamm(&frame, &specs, &opts)
    }
    .map_err(fit_error)?;
    let importance = if with_importance {
        Some(variable_importance(&model, &frame, &opts).map_err(fit_error)?)
    } else {
        None
    };
    let info = RunInfo {
        site: a.site.clone(),
        utc_offset_hours: 0,
        seed: a.seed,
        candidates: names,
        summary: summarize(&frame).map_err(|e| data_err("summarize", e))?,
        vif: None,
    };
    let report = build_report(info, &frame, &model, importance);
    emit(a.out.as_deref(), &to_json(&report).map_err(|e| data_err("report", e))?)?;
    if !model.converged() {
        return Err(PipelineError::new("fit", FailureKind::Fit, "optimizer did not converge; report written"));
    }
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.report).map_err(|e| io_err("plot", &a.report, e))?;
    let report = from_json(&text).map_err(|e| data_err("plot", e))?;
    std::fs::create_dir_all(&a.out).map_err(|e| io_err("plot", &a.out, e))?;
    let mut files = plot_report(&report, &a.out).map_err(|e| data_err("plot", e))?;
    if let Some(f) = &a.frame {
        let frame = read_frame(f)?;
        let start = a.diel_start.unwrap_or(frame.grid[0]);
        files.push(write_diel(&frame, start, report.utc_offset_hours, &a.out).map_err(|e| data_err("plot", e))?);
    }
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config, std::env::vars())?;
    let out = pipeline::run(&cfg)?;
    eprintln!(
        "covariates {:?}, ARMA({},{}), deviance explained {:.4} (GAM {:.4})",
        out.model.covariates(),
        out.model.arma.p,
        out.model.arma.q,
        out.model.de_total,
        out.model.de_gam
    );
    for f in out.files {
        println!("{}", f.display());
    }
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let config = match a.kind {
        SimKind::Fixture => SimConfig::fixture(a.n),
        SimKind::Correlated => SimConfig::correlated_fixture(a.n),
        SimKind::Recovery => SimConfig::recovery(a.n),
    };
    let sim = simulate(&config, a.seed).map_err(|e| data_err("simulate", e))?;
    let paths = write_fixture(&sim, &a.out).map_err(|e| io_err("simulate", &a.out, e))?;
    let truth = serde_json::json!({ "seed": a.seed, "config": sim.config, "truth": sim.truth });
    let truth_path = a.out.join("truth.json");
    emit(Some(&truth_path), &json(&truth)?)?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::new(&cli.log))
        .with_writer(std::io::stderr)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Fetch(a) => cmd_fetch(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Summarize(a) => cmd_summarize(a),
        Command::Vif(a) => cmd_vif(a),
        Command::FitGam(a) => cmd_fit_gam(a),
        Command::FitGamm(a) => cmd_fit_gamm(a, false),
        Command::Importance(a) => cmd_fit_gamm(a, true),
        Command::Plot(a) => cmd_plot(a),
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
