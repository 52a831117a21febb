mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "mllm", version, about = "Multilingual LSTM language models for low-resource languages")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Continue a sweep, skipping cells already in its results file.
    #[arg(long, global = true)]
    pub resume: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean, split, truncate and index the raw corpora.
    Prepare,
    /// Train one model on prepared packs.
    Train(TrainArgs),
    /// Perplexity of a checkpoint on one split of a pack.
    Eval(EvalArgs),
    /// Train and test every (language, variant, threshold, seed) cell.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// mono-lstm, mono-awd or multi-awd.
    #[arg(long)]
    pub variant: Option<String>,
    /// Comma-separated subset of the configured languages.
    #[arg(long, value_delimiter = ',')]
    pub languages: Option<Vec<String>>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Pack directory written by `prepare`.
    #[arg(long)]
    pub pack: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "valid", "test"])]
    pub split: String,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 70)]
    pub bptt: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Languages to truncate, comma-separated (default: all).
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    /// Word limits such as 5K,10K, increasing.
    #[arg(long, value_delimiter = ',', conflicts_with = "full_grid")]
    pub thresholds: Option<Vec<String>>,
    /// Use the full-size grid, 40K to 400K plus FULL.
    #[arg(long)]
    pub full_grid: bool,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

/// Process exit statuses.
pub mod exit {
    pub const USAGE: u8 = 1;
    pub const EXISTS: u8 = 2;
    pub const INCOMPATIBLE: u8 = 3;
    pub const TRAINING: u8 = 4;
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl std::fmt::Display) -> Self {
        CliError {
            code,
            message: message.to_string(),
        }
    }

    pub fn usage(message: impl std::fmt::Display) -> Self {
        CliError::new(exit::USAGE, message)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(exit::USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
