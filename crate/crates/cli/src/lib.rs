//! Command-line front end for the simulated grid job manager.
//!
//! [`run`] parses arguments, executes one subcommand and returns the
//! process exit code: 0 success or permit, 1 denied or illegal request,
//! 2 input error, 3 state-file error.

pub mod args;
mod commands;
pub mod scenario;
pub mod state;

use std::ffi::OsString;
use std::io::Write;

use clap::Parser;
use thiserror::Error;

pub use scenario::{run_scenario, ScenarioReport, ScriptError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DENIED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_STATE: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("denied: {0}")]
    Denied(String),
    #[error("{0}")]
    Input(String),
    #[error("state: {0}")]
    State(#[from] state::StateError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Denied(_) => EXIT_DENIED,
            CliError::Input(_) | CliError::Io(_) => EXIT_INPUT,
            CliError::State(_) => EXIT_STATE,
        }
    }
}

/// Runs the tool on `args` (program name first), writing normal output
/// to `out` and diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match args::Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let rendered = e.render().to_string();
            return if e.use_stderr() {
                let _ = err.write_all(rendered.as_bytes());
                EXIT_INPUT
            } else {
                let _ = out.write_all(rendered.as_bytes());
                EXIT_OK
            };
        }
    };
    match commands::dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "gridauth: {e}");
            e.exit_code()
        }
    }
}
