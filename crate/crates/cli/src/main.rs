//! `frk`: fit spatial random effects models to CSV data, predict over BAUs
//! or regions, and run simulation benchmarks.

mod commands;
mod config;
mod error;
mod ingest;
mod io;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::{Overrides, RunConfig};
use error::CliResult;
use frk_core::{KType, Variant};

#[derive(Debug, Parser)]
#[command(name = "frk", version, about = "Fixed rank kriging over basic areal units")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Observation CSV (overrides `data`).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Fitted-model manifest (overrides `model`).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Prediction regions CSV (overrides `regions`).
    #[arg(long, global = true)]
    regions: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum number of EM iterations.
    #[arg(long, global = true)]
    n_em: Option<usize>,
    /// EM convergence threshold on the log-likelihood change.
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[arg(long, global = true)]
    variant: Option<VariantArg>,
    #[arg(long, global = true)]
    k_type: Option<KTypeArg>,
    #[arg(long, global = true)]
    average_in_bau: Option<bool>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate model parameters and write a model file and fit report.
    Fit,
    /// Predict from a fitted model at BAU level or over regions.
    Predict,
    /// Simulate data sets from a simulation config.
    Simulate,
    /// Score predictors over simulated replications.
    Benchmark,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    Case1,
    Case2,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum KTypeArg {
    Unstructured,
    BlockExponential,
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let variant = cli.variant.map(|v| match v {
        VariantArg::Case1 => Variant::Case1,
        VariantArg::Case2 => Variant::Case2,
    });
    cfg.apply(&Overrides {
        seed: cli.seed,
        n_em: cli.n_em,
        tol: cli.tol,
        variant,
        k_type: cli.k_type.map(|k| match k {
            KTypeArg::Unstructured => KType::Unstructured,
            KTypeArg::BlockExponential => KType::BlockExponential,
        }),
        average_in_bau: cli.average_in_bau,
        output: cli.output,
    });
    if cli.data.is_some() {
        cfg.data = cli.data;
    }
    if cli.model.is_some() {
        cfg.model = cli.model;
    }
    if cli.regions.is_some() {
        cfg.regions = cli.regions;
    }
    match cli.command {
        Command::Fit => commands::cmd_fit(&cfg),
        Command::Predict => commands::cmd_predict(&cfg, variant),
        Command::Simulate => commands::cmd_simulate(&cfg),
        Command::Benchmark => commands::cmd_benchmark(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
