//! `rankswap` experiment harness.
//!
//! Exit codes: 0 all checks passed, 1 a check failed, 2 usage or config error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use config::{Config, ConfigError};

#[derive(Parser)]
#[command(name = "rankswap", version, about = "Two-species walks with rank-based color exchange")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Number of replicas (overrides `seeds` in the config).
    #[arg(long, global = true)]
    seeds: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Particle trajectories: snapshots, occupations and mean empirical tails.
    Simulate,
    /// Exhaustive coupling balance and the pathwise sandwich.
    CoupleVerify,
    /// Dyadic and arithmetic delta sweeps of the barrier iterations.
    Barriers,
    /// Free-boundary reference solve, flux check and Monte Carlo validation.
    Fbp,
    /// Particle tails against the reference bracket across epsilon.
    HydroCompare,
}

#[derive(Serialize)]
struct Versions {
    rankswap: &'static str,
    rankswap_cli: &'static str,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: Command,
    config: &'a Config,
    seed: u64,
    seeds: u64,
    threads: usize,
    versions: Versions,
    wall_time_s: f64,
    passed: bool,
    outputs: Vec<String>,
}

pub enum Failure {
    Config(ConfigError),
    Run(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<rankswap::export::ExportError> for Failure {
    fn from(e: rankswap::export::ExportError) -> Self {
        Failure::Run(e.into())
    }
}

/// What a subcommand produced: the files it wrote and whether its checks held.
pub struct Outcome {
    pub outputs: Vec<String>,
    pub passed: bool,
}

fn run(cli: &Cli) -> Result<bool, Failure> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(n) = cli.seeds {
        cfg.seeds = n;
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ConfigError(format!("threads: {e}")))?;
    }
    std::fs::create_dir_all(&cli.out).map_err(|e| ConfigError(format!("cannot create {}: {e}", cli.out.display())))?;
    let t0 = Instant::now();
    let out = &cli.out;
    let outcome = match cli.command {
        Command::Simulate => commands::simulate(&cfg, out)?,
        Command::CoupleVerify => commands::couple_verify(&cfg, out)?,
        Command::Barriers => commands::barriers(&cfg, out)?,
        Command::Fbp => commands::fbp(&cfg, out)?,
        Command::HydroCompare => commands::hydro_compare(&cfg, out)?,
    };
    let manifest = Manifest {
        command: cli.command,
        config: &cfg,
        seed: cfg.seed,
        seeds: cfg.seeds,
        threads: rayon::current_num_threads(),
        versions: Versions { rankswap: rankswap::VERSION, rankswap_cli: env!("CARGO_PKG_VERSION") },
        wall_time_s: t0.elapsed().as_secs_f64(),
        passed: outcome.passed,
        outputs: outcome.outputs,
    };
    rankswap::export::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(outcome.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("check failed; see {}", cli.out.join("report.json").display());
            ExitCode::from(1)
        }
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
