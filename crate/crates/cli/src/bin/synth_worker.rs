//! Synthetic worker speaking the newline-delimited JSON protocol on
//! stdin/stdout. Useful for exercising worker-backed runs end to end.

use std::fs;
use std::io::{self, BufReader};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use frametree::protocol::SyntheticWorker;
use frametree::SyntheticLandscape;

#[derive(Parser)]
#[command(name = "frametree-synth-worker", version)]
struct Args {
    /// Landscape seed; must match the run's `master_seed`.
    #[arg(long, conflicts_with = "landscape")]
    seed: Option<u64>,
    /// Landscape constants as written to `landscape.json` by a run.
    #[arg(long)]
    landscape: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("TOF_LOG_LEVEL", "error")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let landscape = match (&args.landscape, args.seed) {
        (Some(path), _) => match fs::read_to_string(path)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str::<SyntheticLandscape>(&t).map_err(|e| e.to_string()))
        {
            Ok(l) => l,
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                return ExitCode::from(2);
            }
        },
        (None, seed) => SyntheticLandscape::from_seed(seed.unwrap_or(0)),
    };
    let mut worker = SyntheticWorker::new(landscape);
    match worker.serve(BufReader::new(io::stdin().lock()), io::stdout().lock()) {
        Ok(stats) => {
            log::info!("served {} requests, {} errors", stats.requests, stats.errors);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("worker i/o: {e}");
            ExitCode::from(3)
        }
    }
}
