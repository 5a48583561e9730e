//! Command-line experiment runner for the joint-congruence separation
//! library: solver benchmarks, separation studies against the accuracy
//! bound, bound tables, and one-shot solves of serialized instances.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical failure,
//! 3 solver non-convergence.

mod config;
mod runners;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sedjoco::SedjocoError;

use crate::config::ExperimentConfig;
use crate::runners::{build_pool, Artifacts};

#[derive(Parser)]
#[command(
    name = "sedjoco",
    version,
    about = "Configuration-driven experiment runner for joint-congruence source separation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Benchmark both solvers on random well-posed instances.
    Convergence(RunArgs),
    /// Separation study over amplitude-modulated sources (2 sources, 2 datasets).
    Nonstationary(RunArgs),
    /// Separation study over filtered stationary sources (3 sources, 3 datasets).
    Stationary(RunArgs),
    /// Solve one serialized problem instance.
    Solve(RunArgs),
    /// Tabulate the accuracy bound of a covariance family.
    Crlb(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's master_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for trial-level parallelism (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

impl Command {
    fn args(&self) -> &RunArgs {
        match self {
            Command::Convergence(a)
            | Command::Nonstationary(a)
            | Command::Stationary(a)
            | Command::Solve(a)
            | Command::Crlb(a) => a,
        }
    }

    fn expected_experiment(&self) -> &'static str {
        match self {
            Command::Convergence(_) => "convergence",
            Command::Nonstationary(_) => "nonstationary2x2",
            Command::Stationary(_) => "stationary3x3",
            Command::Solve(_) => "solve",
            Command::Crlb(_) => "crlb",
        }
    }
}

fn load_config(cmd: &Command) -> Result<ExperimentConfig, SedjocoError> {
    let args = cmd.args();
    let text = fs::read_to_string(&args.config).map_err(|e| {
        SedjocoError::InvalidInput(format!("cannot read {}: {}", args.config.display(), e))
    })?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| SedjocoError::InvalidInput(format!("{}: {}", args.config.display(), e)))?;
    if cfg.name() != cmd.expected_experiment() {
        return Err(SedjocoError::InvalidInput(format!(
            "config is for experiment '{}' but the subcommand expects '{}'",
            cfg.name(),
            cmd.expected_experiment()
        )));
    }
    if let Some(seed) = args.seed {
        cfg.override_seed(seed);
    }
    cfg.validate().map_err(SedjocoError::InvalidInput)?;
    Ok(cfg)
}

fn dispatch(cmd: &Command) -> Result<(), SedjocoError> {
    let cfg = load_config(cmd)?;
    let args = cmd.args();
    let out = Artifacts::new(&args.out);
    match &cfg {
        ExperimentConfig::Convergence(c) => {
            let pool = build_pool(args.threads)?;
            runners::convergence::run(c, &out, &pool)
        }
        ExperimentConfig::Nonstationary(c) => {
            let pool = build_pool(args.threads)?;
            runners::nonstationary::run(c, &out, &pool)
        }
        ExperimentConfig::Stationary(c) => {
            let pool = build_pool(args.threads)?;
            runners::stationary::run(c, &out, &pool)
        }
        ExperimentConfig::Solve(c) => runners::solve::run(c, &out),
        ExperimentConfig::Crlb(c) => runners::crlb::run(c, &out),
    }
}

fn exit_code(e: &SedjocoError) -> u8 {
    match e {
        SedjocoError::InvalidInput(_)
        | SedjocoError::DimensionMismatch(_)
        | SedjocoError::InvalidPermutation { .. }
        | SedjocoError::Io(_)
        | SedjocoError::Json(_) => 1,
        SedjocoError::NonConvergence { .. } => 3,
        SedjocoError::NonFinite(_)
        | SedjocoError::Singular(_)
        | SedjocoError::NotPositiveDefinite { .. } => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            e.exit()
        }
        Err(e) => {
            // Command-line mistakes are configuration errors (exit 1); clap's
            // own exit code of 2 is reserved here for numerical failures.
            eprint!("{}", e.render());
            return ExitCode::from(1);
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
