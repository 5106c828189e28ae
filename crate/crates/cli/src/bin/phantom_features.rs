//! Synthetic feature backend: intensity statistics of the disc-level slices.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use paraseg_core::phantom::run_features;

#[derive(Parser)]
#[command(version, about = "Phantom feature backend")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let Command::Features { manifest, out } = Cli::parse().command;
    match run_features(&manifest, &out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("phantom-features: {e}");
            ExitCode::FAILURE
        }
    }
}
