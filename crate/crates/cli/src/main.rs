//! `lama`: train, inspect and benchmark the low-rank multi-head attention
//! classifier.

mod args;
mod manifest;
mod run;

use std::process::ExitCode;

use clap::Parser;
use lama_core::LamaError;

use crate::args::Command;

#[derive(Parser, Debug)]
#[command(name = "lama", version, about = "Low-rank factorized multi-head attention text classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_DATA: u8 = 4;
const EXIT_DIVERGENCE: u8 = 5;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<LamaError>() {
            return match e {
                LamaError::Io { .. } => EXIT_IO,
                LamaError::Config(_) => EXIT_USAGE,
                LamaError::Divergence { .. } => EXIT_DIVERGENCE,
                LamaError::Autodiff(_) => EXIT_FAILURE,
                _ => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<run::UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_FAILURE
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("LAMA_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| run::UsageError(format!("LAMA_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| run::dispatch(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
