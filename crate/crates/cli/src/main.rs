//! Command-line driver for data generation, training, validation, SMPC and benchmarks.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Context;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "ppko", version, about = "Polynomial parametric Koopman models for stochastic MPC")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output directory; overrides the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model file; defaults to <out>/model.bin.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Dataset file; defaults to <out>/dataset.bin.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Quadrature nodes per uncertain dimension.
    #[arg(long, global = true)]
    quad_nodes: Option<usize>,
    /// Prediction or validation horizon.
    #[arg(long, global = true)]
    horizon: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Simulate the plant and write the snapshot dataset.
    GenData,
    /// Fit the dictionary and Koopman coefficients.
    Train,
    /// Compare propagated moments against Monte Carlo.
    Validate,
    /// Run the closed-loop stochastic MPC scenarios.
    Smpc,
    /// Time condensation and solves across model sizes.
    Bench,
}

fn run(cli: Cli) -> CliResult<()> {
    let path = cli.config.ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut config = RunConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let out = cli.out.unwrap_or_else(|| config.out.clone());
    let ctx = Context { config, out, model: cli.model, dataset: cli.dataset, quad_nodes: cli.quad_nodes, horizon: cli.horizon };
    if ctx.quad_nodes == Some(0) {
        return Err(CliError::Config("--quad-nodes must be >= 1".into()));
    }
    match cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Validate => commands::validate(&ctx),
        Command::Smpc => commands::smpc(&ctx),
        Command::Bench => commands::bench(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
