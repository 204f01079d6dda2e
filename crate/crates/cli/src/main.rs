//! `siftlab` command-line driver.
//!
//! Exit codes: 0 success, 2 usage, 3 trace format, 4 runtime, 5 index.

mod commands;
mod config;
mod engines;
mod source;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{compare, fit, gen_trace, mask};

/// A bad combination of arguments detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "siftlab", version, about = "Quantile-threshold sparse attention lab")]
struct Cli {
    /// JSON file with default settings; flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic trace file.
    GenTrace(gen_trace::Args),
    /// Fit power laws to per-step quantiles of one or more traces.
    Fit(fit::Args),
    /// Replay a decode through several engines and tabulate sparsity and error.
    Compare(compare::Args),
    /// Export the attended-position mask of one engine.
    Mask(mask::Args),
}

const EXIT_USAGE: u8 = 2;
const EXIT_FORMAT: u8 = 3;
const EXIT_RUNTIME: u8 = 4;
const EXIT_INDEX: u8 = 5;

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<siftlab::Error>() {
        Some(siftlab::Error::Format { .. } | siftlab::Error::Validation { .. }) => EXIT_FORMAT,
        Some(siftlab::Error::Index { .. }) => EXIT_INDEX,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = config::FileConfig::load(cli.config.as_deref()).and_then(|file| match cli.command {
        Command::GenTrace(a) => gen_trace::run(a, &file),
        Command::Fit(a) => fit::run(a, &file),
        Command::Compare(a) => compare::run(a, &file),
        Command::Mask(a) => mask::run(a, &file),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
