//! `triplanar`: dataset generation, training, inference and evaluation.

mod config;
mod run;

use std::process::ExitCode;

use clap::Parser;

use config::Cli;

/// Raised for bad invocations that clap cannot see (missing inputs, empty
/// datasets). Maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some()
            || e.downcast_ref::<triplanar::Error>()
                .is_some_and(triplanar::Error::is_precondition)
    });
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
