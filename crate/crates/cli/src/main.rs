use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use homlab::experiment::{run_experiment, set_threads, ExitStatus, ExperimentConfig};

/// Stochastic homogenization experiments.
#[derive(Parser, Debug)]
#[command(name = "homlab", version)]
struct Args {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let mut cfg = match ExperimentConfig::from_path(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("homlab: {e}");
            return ExitCode::from(ExitStatus::of_error(&e).code() as u8);
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(k) = args.threads {
        if let Err(e) = set_threads(k) {
            eprintln!("homlab: {e}");
            return ExitCode::from(ExitStatus::ConfigError.code() as u8);
        }
    }
    let report = run_experiment(&cfg, &args.out);
    if let Some(e) = &report.error {
        eprintln!("homlab: {e}");
    }
    for c in report.checks.iter().filter(|c| !c.passed) {
        let kind = if c.fatal { "FAILED" } else { "advisory" };
        eprintln!("homlab: check {} {kind}: {}", c.name, c.detail);
    }
    ExitCode::from(report.status.code() as u8)
}
