//! Command-line front end: `gen`, `train`, `verify` and `compare`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 divergence
//! abort, 3 verification failure, 4 partial comparison.

mod compare;
mod gen;
mod manifest;
mod train;
mod verify;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::LabError;

pub use compare::{format_summary, run_comparison, summarize, CompareConfig, RunSummary};
pub use train::{load_run_config, run_training, write_artifacts, RunArtifacts, RunInputs};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DIVERGENCE: i32 = 2;
pub const EXIT_VERIFY_FAILED: i32 = 3;
pub const EXIT_PARTIAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "preflab", version, about = "Tabular preference-optimization laboratory")]
pub struct Cli {
    /// Seed for every random stream; overrides any seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, visible_alias = "out-dir")]
    pub out: Option<PathBuf>,
    /// TOML config file (train and compare).
    #[arg(long, global = true, visible_alias = "config-file")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the reference policy and sample the preference, reference and pretraining datasets.
    Gen(GenArgs),
    /// Train one method on a generated data directory.
    Train(TrainArgs),
    /// Run the oracle suites on random instances.
    Verify(VerifyArgs),
    /// Run several methods on the same data and summarize.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Environment JSON file.
    #[arg(long, visible_alias = "env")]
    pub env_file: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n_pref: u64,
    #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
    pub n_ref: u64,
    #[arg(long, default_value_t = 10_000)]
    pub n_pretrain: u64,
    /// Iteration cap for the reference-policy fit.
    #[arg(long, default_value_t = 200_000)]
    pub sft_steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sft_step_size: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// mpo, dpo, ipo or bt-reward; overrides the config's method.
    #[arg(long)]
    pub method: Option<String>,
    /// Directory written by `gen`.
    #[arg(long)]
    pub data_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// gradients, theorem1, invariances, closed-form or all.
    #[arg(long, default_value = "all")]
    pub suite: String,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
}

/// Exit code for an error surfaced by a command.
pub fn exit_code(err: &LabError) -> i32 {
    match err {
        LabError::Divergence { .. } => EXIT_DIVERGENCE,
        LabError::OracleFailure(_) => EXIT_VERIFY_FAILED,
        _ => EXIT_USAGE,
    }
}

fn required<T: Clone>(value: &Option<T>, flag: &str) -> crate::Result<T> {
    value
        .clone()
        .ok_or_else(|| LabError::Config(format!("--{flag} is required for this command")))
}

/// Parse `args` and run the selected command, returning the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => gen::run(&cli, a),
        Command::Train(a) => train::run(&cli, a),
        Command::Verify(a) => verify::run(&cli, a),
        Command::Compare(a) => compare::run(&cli, a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
