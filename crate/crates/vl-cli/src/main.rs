//! Command-line surface: corpus generation, pretraining, finetuning,
//! evaluation, subset selection, statistics, gradient checking, and the
//! experiment grid.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Io(_) => 5,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
            CliError::Io(_) => "io",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) | CliError::Io(m) => m,
        }
    }
}

impl From<vl_core::CoreError> for CliError {
    fn from(e: vl_core::CoreError) -> Self {
        use vl_core::CoreError::*;
        match &e {
            Config(_) => CliError::Config(e.to_string()),
            NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<vl_data::DataError> for CliError {
    fn from(e: vl_data::DataError) -> Self {
        match &e {
            vl_data::DataError::Io { .. } => CliError::Io(e.to_string()),
            vl_data::DataError::Core(vl_core::CoreError::Config(_)) => {
                CliError::Config(e.to_string())
            }
            vl_data::DataError::Core(vl_core::CoreError::NonFinite { .. }) => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<vl_train::TrainError> for CliError {
    fn from(e: vl_train::TrainError) -> Self {
        use vl_train::TrainError::*;
        match &e {
            Config(_) | CheckpointVersion { .. } => CliError::Config(e.to_string()),
            NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            Io { .. } => CliError::Io(e.to_string()),
            CheckpointFormat(_) => CliError::Data(e.to_string()),
            Core(c) => match c {
                vl_core::CoreError::Config(_) => CliError::Config(e.to_string()),
                vl_core::CoreError::NonFinite { .. } => CliError::Numeric(e.to_string()),
                _ => CliError::Data(e.to_string()),
            },
            Data(_) => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "vl", version, about = "Desk-scale vision-language pretraining lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shape-world corpora
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the fusion encoder with MLM + ITM
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finetune a classification head on a downstream task
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// random | unimodal | path to a pretraining checkpoint
        #[arg(long)]
        init: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy of a finetuned checkpoint on a manifest split
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Derive a subset manifest with a named strategy
    Subset {
        #[arg(long)]
        manifest: PathBuf,
        /// fraction | min_length | max_length | min_vocab | max_vocab
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long, default_value_t = 10_000)]
        pool: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dataset statistics over the training split
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference verification of the gradients
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        coords: usize,
    },
    /// Fraction-sweep experiment grid over pretraining data
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run independent grid cells on worker threads
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { config, out, seed } => commands::generate(config, out, seed),
        Command::Pretrain { config, steps, seed, batch, out } => {
            commands::pretrain(config, steps, seed, batch, out)
        }
        Command::Finetune { config, init, epochs, seed, batch, out } => {
            commands::finetune(config, init, epochs, seed, batch, out)
        }
        Command::Evaluate { checkpoint, manifest, split, batch, out } => {
            commands::evaluate(checkpoint, manifest, split, batch, out)
        }
        Command::Subset { manifest, strategy, k, p, pool, seed, out } => {
            commands::subset(manifest, strategy, k, p, pool, seed, out)
        }
        Command::Stats { manifest, out } => commands::stats(manifest, out),
        Command::Gradcheck { config, seed, coords } => commands::gradcheck(config, seed, coords),
        Command::Grid { config, out, parallel } => commands::grid(config, out, parallel),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} msg={:?}", e.kind(), e.message());
            ExitCode::from(e.code())
        }
    }
}
