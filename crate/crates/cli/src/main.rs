//! `mimn`: train, evaluate and inspect MIMN models from flat JSON configs.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "mimn", version, about = "Multi-turn inference matching network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on `train_data`, select on `valid_data`, write the best
    /// checkpoint and the per-epoch history.
    Train {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Overall and per-label accuracy of a checkpoint on `test_data`.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated checkpoints whose label distributions are averaged;
        /// replaces `checkpoint`.
        #[arg(long, value_delimiter = ',', value_name = "CKPT,...")]
        ensemble: Option<Vec<PathBuf>>,
    },
    /// Label and distribution for one sentence pair.
    Predict {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        premise: String,
        #[arg(long)]
        hypothesis: String,
    },
    /// Finite-difference check of every trainable tensor at tiny dimensions.
    Gradcheck {
        #[command(flatten)]
        overrides: Overrides,
        /// Scale the backward rule of one primitive (e.g. `matmul`, `tanh`).
        #[arg(long, value_name = "OP")]
        corrupt_backward: Option<String>,
    },
    /// Trainable parameter counts for the configured model.
    Params {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write the synthetic corpus, matching embeddings and a config for it.
    GenToy {
        #[command(flatten)]
        overrides: Overrides,
        /// Total examples, split 80/10/10.
        #[arg(long, default_value_t = 600)]
        size: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { overrides } => commands::train(overrides),
        Command::Eval { overrides, ensemble } => commands::eval(overrides, ensemble.as_deref()),
        Command::Predict {
            overrides,
            premise,
            hypothesis,
        } => commands::predict(overrides, premise, hypothesis),
        Command::Gradcheck {
            overrides,
            corrupt_backward,
        } => commands::gradcheck(overrides, corrupt_backward.as_deref()),
        Command::Params { overrides } => commands::params(overrides),
        Command::GenToy { overrides, size } => commands::gen_toy(overrides, *size),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
