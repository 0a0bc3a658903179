//! `ossl` command-line driver.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | other runtime failure (I/O, degenerate data) |
//! | 2 | invalid arguments, configuration or precondition |
//! | 3 | missing or corrupt artifact |
//! | 4 | training diverged |
//! | 5 | `reproduce` produced different metrics |

use std::ffi::OsString;
use std::fmt;

use clap::Parser;

pub mod args;
pub mod commands;
pub mod manifest;
pub mod source;
pub mod sweep;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ARTIFACT: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_MISMATCH: i32 = 5;

/// A failure carrying the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    pub fn artifact(message: impl Into<String>) -> Self {
        Self::new(EXIT_ARTIFACT, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<ossl_core::Error> for CliError {
    fn from(e: ossl_core::Error) -> Self {
        use ossl_core::Error as E;
        let code = match &e {
            E::Config(_) | E::PromptGeometry { .. } | E::Invalid(_) | E::InsufficientSamples { .. } => EXIT_USAGE,
            E::Artifact { .. } | E::Parse { .. } => EXIT_ARTIFACT,
            E::Divergence { .. } | E::NonFinite(_) => EXIT_DIVERGENCE,
            _ => EXIT_FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(EXIT_FAILURE, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new(EXIT_FAILURE, e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match args::Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
