//! Synthetic train/predict backend: majority vote per slice position,
//! nearest-position lookup at prediction time.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use paraseg_core::phantom::{run_predict, run_train};

#[derive(Parser)]
#[command(version, about = "Memorizing train/predict backend")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    Train {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        model_out: PathBuf,
    },
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let res = match Cli::parse().command {
        Command::Train { pairs, model_out } => run_train(&pairs, &model_out),
        Command::Predict { model, manifest, out } => run_predict(&model, &manifest, &out),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("memorizing-trainer: {e}");
            ExitCode::FAILURE
        }
    }
}
