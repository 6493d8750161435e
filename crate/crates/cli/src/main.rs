//! `node`: train, evaluate and apply neural oblivious decision ensembles.
//!
//! Every failure exits with status 1 and prints one JSON object
//! `{"error": kind, "message": text}` on standard error.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "node", version, about = "Neural oblivious decision ensembles for tabular data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training CSV, overriding `data.train`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Where to write the model file, overriding `output.model`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output directory, overriding `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed, overriding `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Search the architecture grid instead of training one model.
    #[arg(long)]
    pub grid: bool,
}

#[derive(Args, Debug, Clone)]
pub struct ApplyArgs {
    /// Model file, dense or compiled.
    #[arg(long)]
    pub model: PathBuf,
    /// Input CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run configuration; supplies the CSV delimiter and must match the
    /// digest stored in the model.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write it with its history and metrics.
    Train(TrainArgs),
    /// Train one model per grid cell and keep the best.
    Gridsearch(TrainArgs),
    /// Score a model on a labelled CSV.
    Evaluate(ApplyArgs),
    /// Write one prediction row per input row.
    Predict(ApplyArgs),
    /// Permutation feature importance on a labelled CSV.
    Importance {
        #[command(flatten)]
        apply: ApplyArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Permutations per feature.
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Also score the outputs of every layer but the last.
        #[arg(long)]
        learned: bool,
    },
    /// Convert a dense model into a sparse compiled model.
    Compile {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare choice functions on the synthetic tasks.
    Ablation {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = node_core::train::ablation::STANDARD_ROWS)]
        rows: usize,
        /// JSON lines with one record per run.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => commands::train(&args),
        Command::Gridsearch(args) => commands::train(&TrainArgs { grid: true, ..args }),
        Command::Evaluate(args) => commands::evaluate(&args),
        Command::Predict(args) => commands::predict(&args),
        Command::Importance {
            apply,
            seed,
            repeats,
            learned,
        } => commands::importance(&apply, seed, repeats, learned),
        Command::Compile { model, out } => commands::compile(&model, &out),
        Command::Ablation { seed, rows, out } => commands::ablation(seed, rows, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", CliError::Usage(e.to_string()).record());
            return ExitCode::FAILURE;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::FAILURE
        }
    }
}
