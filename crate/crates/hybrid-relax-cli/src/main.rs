//! Command-line front end: load system files, run the simulators and sweeps,
//! reproduce the built-in experiments, and emit CSV/JSON artifacts.
//!
//! Exit codes: 0 success, 2 file not found, 3 schema/validation error,
//! 4 simulation error.

mod run;

use std::process::ExitCode;

use clap::Parser;

use run::{Cli, CliError};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::NotFound(_) => 2,
            CliError::Schema(_) => 3,
            CliError::Simulation(_) => 4,
        }
    }
}
