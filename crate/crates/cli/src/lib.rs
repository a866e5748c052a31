//! Library behind the `riskquant` binary: argument parsing, configuration
//! precedence, the subcommands and their report types.

pub mod args;
pub mod commands;
pub mod config;
pub mod report;

use std::fmt;
use std::path::Path;

use riskquant_core::error::Error;
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_GUARD: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;

/// A failed command: the process exit code and a message for stderr.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    /// Prefixes the message with the file it concerns.
    pub fn in_file(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

/// Guard and feasibility violations exit with 3; everything else is an
/// input error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::EnumerationGuard { .. }
        | Error::QuadratureOrder(_)
        | Error::InfeasibleFloor { .. }
        | Error::SupportTooSmall { .. } => EXIT_GUARD,
        _ => EXIT_INPUT,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

/// Pretty JSON with a trailing newline; the format every report uses.
pub fn to_json<T: Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Failure::input(e.to_string()))
}

/// Writes to `path`, or to stdout when no path is given.
pub fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    use std::io::Write;
    match path {
        Some(p) => std::fs::write(p, bytes).map_err(|e| Failure::input(format!("{}: {e}", p.display()))),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| Failure::input(e.to_string())),
    }
}

/// Size of the global rayon pool from `RISKQUANT_THREADS`, if set.
pub fn threads_from_env(value: Option<&str>) -> Result<Option<usize>, Failure> {
    match value {
        None => Ok(None),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Failure::input(format!(
                "RISKQUANT_THREADS must be a positive integer, got `{v}`"
            ))),
        },
    }
}
