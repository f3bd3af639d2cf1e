//! `frametree`: run searches, oracles and scaling sweeps on the synthetic
//! sandbox or on attached workers.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use frametree::analysis::{
    brute_force_oracle, fit_geometric_decay, predict_cost, render_svg, render_table, run_scaling_experiment,
    OracleError, ScalingCurve,
};
use frametree::manifest::{BackendInfo, OracleManifest, RunManifest, EVENT_LOG_FILE};
use frametree::model::ConfigReport;
use frametree::protocol::{check_worker, worker_backends, ProtocolError, SessionConfig, WorkerSession};
use frametree::search::GateConfig;
use frametree::{run_search, Algorithm, Backends, RunConfig, Schedule, SearchError, SearchOptions, SyntheticLandscape};

const EXIT_CONFIG: u8 = 2;
const EXIT_WORKER: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(
    name = "frametree",
    version,
    about = "Best-of-N and tree-of-frames search over generated frame sequences"
)]
struct Cli {
    /// Size of the worker thread pool; defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Best-of-N: sample N complete paths, keep the best.
    Linear(RunArgs),
    /// Tree-of-frames search.
    Tof(RunArgs),
    /// Exhaustively enumerate every path of a small unpruned tree.
    Oracle(RunArgs),
    /// Best score against N over a grid of root counts.
    Bench(BenchArgs),
    /// Fit `s_inf - a * r^n` to a saved scaling curve.
    Fit(FitArgs),
    /// Exercise an attached worker and report protocol violations.
    ProtocolCheck(CheckArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Table,
    Svg,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON). Without it a default synthetic schedule is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the manifest and event log.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker command line, e.g. "frametree-synth-worker --seed 7".
    #[arg(long)]
    workers: Option<String>,
    /// Enable image-level gates (clarity, then potential).
    #[arg(long)]
    gates: bool,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BenchAlgorithm {
    Linear,
    Tof,
    Both,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Root counts: `n=1..16`, `1..16` or `1,2,4,8`.
    #[arg(long, default_value = "n=1..16")]
    grid: String,
    #[arg(long, value_enum, default_value = "tof")]
    algorithm: BenchAlgorithm,
}

#[derive(Args)]
struct FitArgs {
    /// Scaling curve JSON written by `bench`.
    #[arg(long)]
    curve: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Args)]
struct CheckArgs {
    /// Worker command line.
    #[arg(long)]
    workers: String,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Worker(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Worker(_) => EXIT_WORKER,
            Failure::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Worker(m) => write!(f, "worker fault: {m}"),
            Failure::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<SearchError> for Failure {
    fn from(e: SearchError) -> Self {
        if e.is_backend_fault() {
            Failure::Worker(e.to_string())
        } else if matches!(
            e,
            SearchError::Config(_) | SearchError::UnknownVerifier(_) | SearchError::Decompose(_)
        ) {
            Failure::Config(e.to_string())
        } else {
            Failure::Other(e.to_string())
        }
    }
}

impl From<ProtocolError> for Failure {
    fn from(e: ProtocolError) -> Self {
        Failure::Worker(e.to_string())
    }
}

impl From<ConfigReport> for Failure {
    fn from(e: ConfigReport) -> Self {
        Failure::Config(e.to_string())
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Other(format!("{}: {e}", path.display()))
}

fn write(path: &Path, content: &str) -> Result<(), Failure> {
    fs::write(path, content).map_err(io_err(path))
}

fn load_config(args: &RunArgs, algorithm: Algorithm, default: Schedule) -> Result<RunConfig, Failure> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            RunConfig::from_json(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::synthetic(algorithm, default, 0),
    };
    config.algorithm = algorithm;
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    if let Some(workers) = &args.workers {
        config.worker_endpoints = Some(vec![workers.clone()]);
    }
    Ok(config)
}

fn options(args: &RunArgs) -> SearchOptions {
    SearchOptions {
        gates: args.gates.then(GateConfig::default),
    }
}

struct Attached {
    backends: Backends,
    info: BackendInfo,
    session: Option<Arc<WorkerSession>>,
}

fn attach(config: &RunConfig) -> Result<Attached, Failure> {
    match config.worker_endpoints.as_deref() {
        None | Some([]) => Ok(Attached {
            backends: Backends::synthetic(config)?,
            info: BackendInfo::synthetic(),
            session: None,
        }),
        Some([command]) => {
            let argv: Vec<String> = command.split_whitespace().map(String::from).collect();
            let session = Arc::new(WorkerSession::spawn(&argv, SessionConfig::default())?);
            let info = BackendInfo {
                kind: "worker".into(),
                worker: Some(session.hello().worker.clone()),
                deterministic: session.capabilities().deterministic,
            };
            if !info.deterministic {
                log::warn!("worker {:?} declares nondeterministic output", info.worker);
            }
            Ok(Attached {
                backends: worker_backends(config, session.clone())?,
                info,
                session: Some(session),
            })
        }
        Some(_) => Err(Failure::Config("exactly one worker endpoint is supported".into())),
    }
}

fn write_timing(out: &Path, started: Instant) -> Result<(), Failure> {
    let timing = json!({ "wall_seconds": started.elapsed().as_secs_f64() });
    write(&out.join("timing.json"), &format!("{timing}\n"))
}

fn run(args: &RunArgs, algorithm: Algorithm) -> Result<(), Failure> {
    let started = Instant::now();
    let config = load_config(args, algorithm, Schedule::tof_default(8, 16))?;
    let attached = attach(&config)?;
    let result = run_search(&config, &attached.backends, &options(args));
    if let Some(session) = &attached.session {
        session.shutdown();
    }
    let result = result?;
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let (manifest, log) = RunManifest::from_result(&config, &result, attached.info);
    write(&args.out.join(EVENT_LOG_FILE), &log)?;
    write(&args.out.join("manifest.json"), &manifest.to_json())?;
    if attached.session.is_none() {
        let landscape = SyntheticLandscape::from_seed(config.master_seed);
        write(
            &args.out.join("landscape.json"),
            &serde_json::to_string_pretty(&landscape).expect("landscape serializes"),
        )?;
    }
    write_timing(&args.out, started)?;
    let totals = result.ledger.totals();
    match args.format {
        Format::Json => println!(
            "{}",
            json!({
                "best_score": result.quality,
                "final_aggregated": result.final_aggregated,
                "nfe": totals.nfe,
                "extend_calls": totals.extend_calls,
                "predicted_extend_calls": predict_cost(&config.schedule, algorithm).total_nodes,
            })
        ),
        _ => {
            println!("best_score\t{:.6}", result.quality);
            println!("nfe\t{}", totals.nfe);
        }
    }
    Ok(())
}

fn oracle(args: &RunArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let config = load_config(args, Algorithm::Oracle, Schedule::exhaustive(4, 6, 2))?;
    let landscape = SyntheticLandscape::from_seed(config.master_seed);
    let best = brute_force_oracle(&landscape, &config.schedule, config.master_seed).map_err(|e| match e {
        OracleError::TooManyPaths { .. } | OracleError::Config(_) => Failure::Config(e.to_string()),
    })?;
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    write(&args.out.join(EVENT_LOG_FILE), "")?;
    let manifest = OracleManifest::new(&config, best.clone());
    write(&args.out.join("manifest.json"), &manifest.to_json())?;
    write_timing(&args.out, started)?;
    match args.format {
        Format::Json => println!("{}", serde_json::to_string(&best).expect("serializes")),
        _ => {
            println!("best_score\t{:.6}", best.best_score);
            println!("paths\t{}", best.paths_enumerated);
        }
    }
    Ok(())
}

fn parse_grid(spec: &str) -> Result<Vec<usize>, Failure> {
    let bad = || Failure::Config(format!("bad grid {spec:?}; expected n=1..16 or 1,2,4"));
    let body = spec.strip_prefix("n=").unwrap_or(spec);
    let grid: Vec<usize> = if let Some((a, b)) = body.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        (a..=b).collect()
    } else {
        body.split(',')
            .map(|x| x.trim().parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?
    };
    if grid.is_empty() || grid.contains(&0) {
        return Err(bad());
    }
    Ok(grid)
}

fn bench(args: &BenchArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let grid = parse_grid(&args.grid)?;
    let config = load_config(&args.run, Algorithm::Tof, Schedule::tof_default(1, 16))?;
    let attached = attach(&config)?;
    let algorithms: &[Algorithm] = match args.algorithm {
        BenchAlgorithm::Linear => &[Algorithm::Linear],
        BenchAlgorithm::Tof => &[Algorithm::Tof],
        BenchAlgorithm::Both => &[Algorithm::Linear, Algorithm::Tof],
    };
    let curves = algorithms
        .iter()
        .map(|&a| run_scaling_experiment(a, &grid, &config, &attached.backends, &options(&args.run)))
        .collect::<Result<Vec<ScalingCurve>, _>>();
    if let Some(session) = &attached.session {
        session.shutdown();
    }
    let curves = curves?;
    let out = &args.run.out;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let curve_json = if curves.len() == 1 {
        serde_json::to_string_pretty(&curves[0])
    } else {
        serde_json::to_string_pretty(&curves)
    }
    .expect("curves serialize");
    write(&out.join("curve.json"), &format!("{curve_json}\n"))?;
    let fits: Vec<_> = curves.iter().map(|c| fit_geometric_decay(c).ok()).collect();
    let svg = render_svg(&curves, &fits);
    write(&out.join("curve.svg"), &svg)?;
    write_timing(out, started)?;
    match args.run.format {
        Format::Json => println!("{curve_json}"),
        Format::Table => print!("{}", render_table(&curves)),
        Format::Svg => print!("{svg}"),
    }
    Ok(())
}

fn fit(args: &FitArgs) -> Result<(), Failure> {
    let bad = |e: &dyn std::fmt::Display| Failure::Config(format!("{}: {e}", args.curve.display()));
    let text = fs::read_to_string(&args.curve).map_err(|e| bad(&e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(&e))?;
    // `bench --algorithm both` writes an array of curves
    let single = !value.is_array();
    let curves: Vec<ScalingCurve> = if single {
        vec![serde_json::from_value(value).map_err(|e| bad(&e))?]
    } else {
        serde_json::from_value(value).map_err(|e| bad(&e))?
    };
    let mut fits = Vec::with_capacity(curves.len());
    for c in &curves {
        let fit = fit_geometric_decay(c).map_err(|e| Failure::Config(format!("{}: {e}", c.algorithm.as_str())))?;
        fits.push((c.algorithm, fit));
    }
    let body = if single {
        serde_json::to_string_pretty(&fits[0].1)
    } else {
        let tagged: Vec<_> = fits.iter().map(|(a, f)| json!({ "algorithm": a, "fit": f })).collect();
        serde_json::to_string_pretty(&tagged)
    }
    .expect("fit serializes");
    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(io_err(out))?;
        write(&out.join("fit.json"), &format!("{body}\n"))?;
    }
    match args.format {
        Format::Json => println!("{body}"),
        _ => {
            for (algorithm, fit) in &fits {
                if !single {
                    println!("algorithm\t{}", algorithm.as_str());
                }
                println!("s_inf\t{:.9}", fit.s_inf);
                println!("amplitude\t{:.9}", fit.amplitude);
                match fit.ratio {
                    Some(r) => println!("ratio\t{r:.9}"),
                    None => println!("ratio\t-"),
                }
                println!("residual_rms\t{:.3e}", fit.residual_rms);
                println!("degenerate\t{}", fit.degenerate);
            }
        }
    }
    Ok(())
}

fn protocol_check(args: &CheckArgs) -> Result<(), Failure> {
    let argv: Vec<String> = args.workers.split_whitespace().map(String::from).collect();
    let session = WorkerSession::spawn(&argv, SessionConfig::default())?;
    let report = check_worker(&session);
    session.shutdown();
    match args.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
        _ => {
            for c in &report.checks {
                let verdict = if c.passed { "ok" } else { "FAIL" };
                println!("{verdict}\t{}\t{}", c.name, c.detail);
            }
            println!(
                "requests {} answered {} timed_out {} violations {}",
                report.stats.sent,
                report.stats.answered,
                report.stats.timed_out,
                report.violations()
            );
        }
    }
    if report.violations() > 0 {
        return Err(Failure::Worker(format!("{} protocol violations", report.violations())));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("TOF_LOG_LEVEL", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("could not size thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match &cli.command {
        Command::Linear(a) => run(a, Algorithm::Linear),
        Command::Tof(a) => run(a, Algorithm::Tof),
        Command::Oracle(a) => oracle(a),
        Command::Bench(a) => bench(a),
        Command::Fit(a) => fit(a),
        Command::ProtocolCheck(a) => protocol_check(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("frametree: {f}");
            ExitCode::from(f.code())
        }
    }
}
