//! `adanorm`: generate data, train, evaluate, diagnose and probe
//! normalization experiments from a TOML config.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Failures split by exit code: 1 before any work starts, 2 afterwards.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Runtime(#[from] adanorm_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "adanorm", version, about = "Adaptive feature normalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    /// Experiment config (TOML). Omitted keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Global seed; overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation.
    #[arg(long, env = "ADANORM_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the dataset splits and a sample manifest.
    GenData(Common),
    /// Train a model and write its checkpoint and history.
    Train(Common),
    /// Accuracy of a checkpoint under every requested scheme.
    Eval(Common),
    /// Per-filter moment reports and histograms.
    Diagnose(Common),
    /// Decode the extraneous variable from captured features.
    Invariance(Common),
    /// Run the synthetic acceptance pipeline.
    Repro(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (name, common) = match &cli.command {
        Command::GenData(c) => ("gen-data", c),
        Command::Train(c) => ("train", c),
        Command::Eval(c) => ("eval", c),
        Command::Diagnose(c) => ("diagnose", c),
        Command::Invariance(c) => ("invariance", c),
        Command::Repro(c) => ("repro", c),
    };
    match commands::run(name, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("adanorm {name}: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
