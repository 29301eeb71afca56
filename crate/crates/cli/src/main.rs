use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{info, LevelFilter};
use matzoh_cli::config::{canonical_hash, RunConfig, Tolerances};
use matzoh_cli::pipeline::{self, GeodesicRequest};
use matzoh_cli::plot::emit_plot_data;
use matzoh_cli::report::Report;
use matzoh_cli::{CliError, ExitStatus, Stage};
use matzoh_core::classify::{Branch, ClassifyConfig};
use matzoh_core::convex::BodySpec;
use matzoh_core::io::{load_field, load_series, save_series, FIELD_EXTENSION};
use matzoh_core::operators::OperatorSpec;
use serde::de::DeserializeOwned;
use serde_json::json;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(
    name = "matzoh",
    version,
    about = "Invariant level sets of heat and quasi-linear parabolic flows"
)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for series or CSV plot data.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Report path (JSON); defaults to `<out>/report.json` when `--out` is set.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve the configured initial data and save the snapshots.
    Evolve,
    /// Residual of the level profile per time, the D lattice and the verdict.
    CheckInvariance(SeriesArgs),
    /// Decide the branch of a time series (exit 2: not invariant, 3: mixed).
    Classify(SeriesArgs),
    /// Isoparametric residuals, surface types and level geometry of a field.
    VerifyIsoparametric(FieldArgs),
    /// Integral curves of DH(D phi) from seed points.
    Geodesic(GeodesicArgs),
    /// Full pipeline from a configuration.
    Run,
}

#[derive(Args)]
struct SeriesArgs {
    /// Directory of snapshot field files.
    #[arg(long)]
    series: PathBuf,
    /// Operator (JSON); heat when absent.
    #[arg(long)]
    operator: Option<PathBuf>,
}

#[derive(Args)]
struct FieldArgs {
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    operator: Option<PathBuf>,
    /// Convex body (JSON) for anisotropic geometry.
    #[arg(long)]
    body: Option<PathBuf>,
    /// Level to analyse (repeatable); evenly spaced levels otherwise.
    #[arg(long = "level")]
    levels: Vec<f64>,
}

#[derive(Args)]
struct GeodesicArgs {
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    body: PathBuf,
    /// Seed point `x1,...,xN` (repeatable).
    #[arg(long = "seed", required = true, allow_hyphen_values = true, value_parser = parse_point)]
    seeds: Vec<Vec<f64>>,
    #[arg(long, default_value_t = 0.3)]
    tau: f64,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    /// Project seeds onto this level of the traced field.
    #[arg(long)]
    level: Option<f64>,
    /// Trace on the reparametrised field with 2H(D phi) = 1.
    #[arg(long)]
    normalize: bool,
}

fn parse_point(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}")))
        .collect()
}

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{what} {}: {e}", path.display())))
}

fn digest(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn series_digests(dir: &Path) -> Result<Vec<String>, CliError> {
    let rd = std::fs::read_dir(dir).map_err(|e| CliError::config(format!("series {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == FIELD_EXTENSION))
        .collect();
    files.sort();
    files.iter().map(|p| digest(p)).collect()
}

struct Ctx {
    config: Option<RunConfig>,
    base: PathBuf,
    out: Option<PathBuf>,
}

impl Ctx {
    fn require_config(&self) -> Result<&RunConfig, CliError> {
        self.config
            .as_ref()
            .ok_or_else(|| CliError::config("--config is required"))
    }

    fn operator(&self, path: Option<&Path>) -> Result<OperatorSpec, CliError> {
        match (path, &self.config) {
            (Some(p), _) => read_json(p, "operator"),
            (None, Some(c)) => Ok(c.operator.clone()),
            (None, None) => Ok(OperatorSpec::Heat {}),
        }
    }

    fn tolerances(&self) -> Tolerances {
        self.config.as_ref().map(|c| c.tolerances.clone()).unwrap_or_default()
    }

    fn classify_config(&self) -> ClassifyConfig {
        self.tolerances().classify_config()
    }
}

fn series_command(ctx: &Ctx, name: &str, args: &SeriesArgs, report: &mut Report) -> Result<(), CliError> {
    let spec = ctx.operator(args.operator.as_deref())?;
    report.provenance.config_sha256 = canonical_hash(&json!({
        "command": name,
        "operator": spec,
        "tolerances": ctx.tolerances(),
        "series": series_digests(&args.series)?,
    }));
    let series = load_series(&args.series).stage("load")?;
    info!("loaded {} snapshots from {}", series.len(), args.series.display());
    let op = spec.build(series.reference().grid().dim()).stage("config")?;
    let cfg = ctx.classify_config();
    if name == "check-invariance" {
        pipeline::check_invariance(&series, &op, &cfg, report)
    } else {
        pipeline::classify_series(&series, &op, &cfg, report).map(|_| ())
    }
}

fn verify_command(ctx: &Ctx, args: &FieldArgs, report: &mut Report) -> Result<(), CliError> {
    let spec = ctx.operator(args.operator.as_deref())?;
    let body_spec: Option<BodySpec> = args.body.as_deref().map(|p| read_json(p, "body")).transpose()?;
    report.provenance.config_sha256 = canonical_hash(&json!({
        "command": "verify-isoparametric",
        "operator": spec,
        "body": body_spec,
        "levels": args.levels,
        "tolerances": ctx.tolerances(),
        "field": digest(&args.field)?,
    }));
    let phi = load_field(&args.field).stage("load")?;
    let dim = phi.grid().dim();
    let op = spec.build(dim).stage("config")?;
    let body = body_spec.map(|b| b.build(dim)).transpose().stage("config")?;
    let levels = if args.levels.is_empty() {
        let n = ctx.config.as_ref().map_or(3, |c| c.analysis.n_levels);
        pipeline::default_levels(&phi, n)
    } else {
        args.levels.clone()
    };
    let pass = pipeline::iso_analysis(&phi, &op, body.as_ref(), &levels, &ctx.classify_config(), report)?;
    report.set_verdict(if pass { "isoparametric" } else { "not_isoparametric" }, ExitStatus::Ok);
    Ok(())
}

fn geodesic_command(args: &GeodesicArgs, report: &mut Report) -> Result<(), CliError> {
    let body_spec: BodySpec = read_json(&args.body, "body")?;
    report.provenance.config_sha256 = canonical_hash(&json!({
        "command": "geodesic",
        "body": body_spec,
        "seeds": args.seeds,
        "tau": args.tau,
        "steps": args.steps,
        "level": args.level,
        "normalize": args.normalize,
        "field": digest(&args.field)?,
    }));
    let phi = load_field(&args.field).stage("load")?;
    let body = body_spec.build(phi.grid().dim()).stage("config")?;
    let req = GeodesicRequest {
        seeds: &args.seeds,
        tau_max: args.tau,
        n_steps: args.steps,
        normalize: args.normalize,
        level: args.level,
    };
    pipeline::geodesics(&phi, &body, &req, report)?;
    if let Some(g) = &report.geodesics {
        println!(
            "straightness {:.3e}  level_rate_error {:.3e}  parallelism {:.3e}",
            g.max_straightness, g.max_level_rate_error, g.parallelism
        );
    }
    Ok(())
}

fn evolve_command(ctx: &Ctx, report: &mut Report) -> Result<(), CliError> {
    let cfg = ctx.require_config()?;
    report.provenance.config_sha256 = canonical_hash(cfg);
    let out = ctx.out.as_ref().ok_or_else(|| CliError::config("--out is required"))?;
    let series = pipeline::build_series(cfg, &ctx.base)?;
    let paths = save_series(out, &series).stage("evolve")?;
    info!("wrote {} snapshots to {}", paths.len(), out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<ExitStatus, CliError> {
    let config = cli.config.as_deref().map(RunConfig::load).transpose()?;
    let base = cli
        .config
        .as_deref()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let ctx = Ctx {
        config,
        base,
        out: cli.out.clone(),
    };
    let start = Instant::now();
    let (name, mut report) = match &cli.command {
        Command::Run => {
            let cfg = ctx.require_config()?;
            ("run", pipeline::run_pipeline(cfg, &ctx.base))
        }
        cmd => {
            let name = match cmd {
                Command::Evolve => "evolve",
                Command::CheckInvariance(_) => "check-invariance",
                Command::Classify(_) => "classify",
                Command::VerifyIsoparametric(_) => "verify-isoparametric",
                Command::Geodesic(_) => "geodesic",
                Command::Run => unreachable!(),
            };
            let mut report = Report::new(name, String::new());
            let res = match cmd {
                Command::Evolve => evolve_command(&ctx, &mut report),
                Command::CheckInvariance(a) | Command::Classify(a) => series_command(&ctx, name, a, &mut report),
                Command::VerifyIsoparametric(a) => verify_command(&ctx, a, &mut report),
                Command::Geodesic(a) => geodesic_command(a, &mut report),
                Command::Run => unreachable!(),
            };
            if let Err(e) = res {
                report.fail(&e);
            }
            (name, report)
        }
    };
    report.provenance.wall_clock_seconds = start.elapsed().as_secs_f64();

    let report_path = cli.report.clone().or_else(|| {
        cli.out
            .as_ref()
            .filter(|_| name != "evolve")
            .map(|o| o.join("report.json"))
    });
    if let Some(out) = cli.out.as_ref().filter(|_| name != "evolve") {
        emit_plot_data(&report, out)?;
    }
    if let Some(p) = &report_path {
        report.write(p)?;
    }
    match (&report.status.stage, &report.status.error) {
        (Some(stage), Some(err)) => eprintln!("error [{stage}]: {err}"),
        _ => {
            let detail = match report.classification.as_ref() {
                Some(c) if c.branch == Branch::EigenSplit => {
                    format!(" lambda={:.6} mu={:.6}", c.lambda.unwrap_or(0.0), c.mu.unwrap_or(0.0))
                }
                Some(c) if c.branch == Branch::LinearDrift => format!(" gamma={:.6}", c.gamma.unwrap_or(0.0)),
                _ => String::new(),
            };
            println!("{}: {}{detail}", report.command, report.status.verdict);
        }
    }
    Ok(report.exit_status())
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("MATZOH_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(format!("MATZOH_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            LevelFilter::Info
        } else {
            LevelFilter::Warn
        })
        .format_timestamp(None)
        .init();
    let status = init_threads().and_then(|_| run(&cli)).unwrap_or_else(|e| {
        eprintln!("error [{}]: {}", e.stage, e.message);
        e.status
    });
    ExitCode::from(status.code() as u8)
}
