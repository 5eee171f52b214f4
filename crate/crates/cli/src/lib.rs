//! Command-line driver: dataset generation, training, evaluation,
//! benchmarking, filter export and baseline comparison.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, ValueEnum};

pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Write a synthetic dataset as dfc-xyz files with a manifest.
    GenData,
    /// Train the configured stack; writes a checkpoint and train_log.csv.
    Train,
    /// Score a checkpoint on both splits; writes eval.csv.
    Eval,
    /// Time the fast forward pass against the reference; writes bench.csv.
    Bench,
    /// Dump one deformable layer's anchor weights as CSV.
    ExportFilters,
    /// Train deformable, MLP-filter and voxel baselines; writes compare.csv.
    CompareBaselines,
}

#[derive(Debug, Parser)]
#[command(name = "deformconv", version, about = "Deformable-filter convolution on point clouds")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for the math kernels.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Overrides the config's `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let raw = config::RawConfig::load(&cli.config)?;
    RunConfig::from_raw(&raw, cli.seed, cli.out.clone())
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = resolve_config(cli)?;
    if cli.threads == 0 {
        return Err(CliError::config("--threads must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::config(format!("cannot start {} threads: {e}", cli.threads)))?;
    pool.install(|| match cli.command {
        Command::GenData => commands::gen_data(&cfg).map(drop),
        Command::Train => commands::train(&cfg).map(drop),
        Command::Eval => commands::eval(&cfg).map(drop),
        Command::Bench => commands::bench(&cfg).map(drop),
        Command::ExportFilters => commands::export_filters(&cfg).map(drop),
        Command::CompareBaselines => commands::compare_baselines(&cfg).map(drop),
    })
}
