//! Synthetic segmentation backend. Perturbation strength comes from
//! `PHANTOM_SIGMA` (default 0) and the seed from `PARASEG_SEED`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use paraseg_core::phantom::{run_segment, SegmenterParams};
use paraseg_core::pipeline::SEED_ENV;

#[derive(Parser)]
#[command(version, about = "Phantom segmentation backend")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    Segment {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn env_or<T: std::str::FromStr>(name: &str, default: T) -> anyhow::Result<T> {
    match std::env::var(name) {
        Ok(v) => v.parse().map_err(|_| anyhow::anyhow!("{name}: cannot parse {v:?}")),
        Err(_) => Ok(default),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let Command::Segment { plan, prompt, out } = cli.command;
    let params = SegmenterParams { sigma: env_or("PHANTOM_SIGMA", 0.0)?, seed: env_or(SEED_ENV, 0)? };
    run_segment(&plan, &prompt, &out, params)?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("phantom-segmenter: {e:#}");
            ExitCode::FAILURE
        }
    }
}
