//! The `crisp` command-line pipeline: synthetic data generation, geographic
//! splitting, contrastive pretraining, supervised heads, evaluation,
//! gradient checks and cluster analysis.
//!
//! Every command reads a JSON configuration (`--config`) with `--set
//! key=value` overrides, writes the resolved configuration next to its
//! outputs and prints machine-readable results on standard output.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod log;

use commands::supervised::{Mode, SupervisedConfig};
use error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "crisp", version, about = "Ground-level/aerial contrastive pretraining pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON configuration file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    GenData(RunArgs),
    /// Build the geographic block split and labeled subsets.
    Split(RunArgs),
    /// Contrastive pretraining of the two encoders.
    Pretrain(RunArgs),
    /// Train a classifier end to end.
    Finetune(RunArgs),
    /// Fit a linear classifier on frozen features.
    Probe(RunArgs),
    /// Score a classifier or a prediction file.
    Eval(RunArgs),
    /// Finite-difference check of the loss gradients.
    Gradcheck(RunArgs),
    /// Cluster ground embeddings and compare with observation ids.
    ClusterEval(RunArgs),
}

fn load<T: serde::de::DeserializeOwned>(args: &RunArgs) -> CliResult<T> {
    config::load(args.config.as_deref(), &args.sets)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => commands::gen_data::run(&load(&a)?, out),
        Command::Split(a) => commands::split::run(&load(&a)?, out),
        Command::Pretrain(a) => commands::pretrain::run(&load(&a)?, out),
        Command::Finetune(a) => commands::supervised::run(&load::<SupervisedConfig>(&a)?.resolve(Mode::Finetune), out),
        Command::Probe(a) => commands::supervised::run(&load::<SupervisedConfig>(&a)?.resolve(Mode::Probe), out),
        Command::Eval(a) => commands::eval::run(&load(&a)?, out),
        Command::Gradcheck(a) => commands::gradcheck::run(&load(&a)?, out),
        Command::ClusterEval(a) => commands::cluster_eval::run(&load(&a)?, out),
    }
}

/// Parses `args` (program name first) and runs the command, reporting
/// failures on stderr.
pub fn main_with<I, T>(args: I, out: &mut dyn Write) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
