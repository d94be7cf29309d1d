//! `longreg`: register longitudinal series, generate synthetic ones,
//! evaluate recovered fields and run the LNCC simulations.
//!
//! Every command prints one JSON object to stdout. Exit codes: 0 success,
//! 1 internal failure, 2 malformed input, 3 optimization divergence.

mod eval;
mod lncc_sim;
mod register;
mod synth;

use std::path::Path;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use longreg_core::Error;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "longreg", version, about = "Longitudinal diffeomorphic registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Jointly register every session of a series.
    Register(register::Args),
    /// Generate a synthetic series with ground-truth deformations.
    Synth(synth::Args),
    /// Compare an estimated displacement field with the truth.
    Eval(eval::Args),
    /// Monte-Carlo checks of the expected LNCC and the offset landscape.
    LnccSim(lncc_sim::Args),
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Divergence { .. } => 3,
        e if e.is_input_error() => 2,
        _ => 1,
    }
}

/// Attributes an error without a location to `path`.
pub(crate) fn at(path: &Path) -> impl FnOnce(Error) -> Error + '_ {
    move |e| match e {
        Error::InvalidArgument(msg) | Error::GridMismatch(msg) => Error::Format {
            path: path.to_path_buf(),
            msg,
        },
        other => other,
    }
}

pub(crate) fn create_dir(dir: &Path) -> longreg_core::Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

pub(crate) fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("results serialize"));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Register(a) => register::run(a),
        Command::Synth(a) => synth::run(a),
        Command::Eval(a) => eval::run(a),
        Command::LnccSim(a) => lncc_sim::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
