//! `stseg` — spatio-temporal video segmentation pipeline.
//!
//! Subcommands: synth, train, eval, gradcheck, predict, ab. Every command is
//! deterministic given its inputs and seed; exit codes are 0 success,
//! 2 configuration error, 3 data error, 4 numeric abort.

mod ab;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stseg_core::Error;

#[derive(Parser)]
#[command(name = "stseg", version, about = "Spatio-temporal FCN video segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run config ({"model": .., "optim": .., "dataset": .., "out": ..});
    /// flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed for all random streams (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker cap for evaluation; 1 is the deterministic reference (results
    /// are identical for any value).
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory (overrides the config file).
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic moving-shapes dataset with train/val/test splits.
    Synth {
        #[command(flatten)]
        common: Common,
        /// SynthSpec JSON file; omit to use a preset.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Built-in spec: "motion" (drifting shapes) or "static" (speed 0).
        #[arg(long, default_value = "motion")]
        preset: String,
    },
    /// Train a model on a dataset of sequences.
    Train {
        #[command(flatten)]
        common: Common,
        /// Override the spatio-temporal mode: off | on_top | fusion.
        #[arg(long)]
        st: Option<String>,
    },
    /// Evaluate a checkpoint over a dataset; writes metrics.json/.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of the full backward pass.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Sampled coordinates per parameter block.
        #[arg(long, default_value_t = 200)]
        subsample: usize,
    },
    /// Write predicted label maps (one PGM per frame) for a dataset.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate the frame-independent baseline and the
    /// spatio-temporal model under identical seeds and data order.
    Ab {
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Json(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth {
            common,
            spec,
            preset,
        } => commands::cmd_synth(&common, spec.as_deref(), &preset),
        Command::Train { common, st } => commands::cmd_train(&common, st.as_deref()),
        Command::Eval { common, checkpoint } => commands::cmd_eval(&common, &checkpoint),
        Command::Gradcheck {
            common,
            eps,
            subsample,
        } => commands::cmd_gradcheck(&common, eps, subsample),
        Command::Predict { common, checkpoint } => commands::cmd_predict(&common, &checkpoint),
        Command::Ab { common } => ab::cmd_ab(&common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stseg: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
