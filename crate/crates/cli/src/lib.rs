//! Experiment harness behind the `cored` binary: dataset generation, task
//! sequences for several strategies, ablations, the gradient audit and
//! zero-shot evaluation.

use std::fmt;

pub mod commands;
pub mod spec;

pub use commands::{Ablation, Comparison, SeedOutcome, VariantSummary};
pub use spec::{RunSpec, SpecOverrides, Stage};

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    /// Gradient audit failure, or an error outside the codes below.
    pub const FAILURE: i32 = 1;
    pub const SPEC: i32 = 2;
    pub const MISSING_INPUT: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

/// An error tagged with the exit code the binary should return.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn new(code: i32, error: impl Into<anyhow::Error>) -> Self {
        Self { code, error: error.into() }
    }

    pub fn spec(message: impl fmt::Display) -> Self {
        Self::new(exit::SPEC, anyhow::anyhow!("{message}"))
    }

    pub fn missing(message: impl fmt::Display) -> Self {
        Self::new(exit::MISSING_INPUT, anyhow::anyhow!("{message}"))
    }

    pub fn context(self, message: impl fmt::Display + Send + Sync + 'static) -> Self {
        Self { code: self.code, error: self.error.context(message) }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl From<cored::Error> for CliError {
    fn from(e: cored::Error) -> Self {
        use cored::Error as E;
        let code = match &e {
            E::Parameter(_) | E::Dimension(_) | E::Data(_) | E::Json(_) => exit::SPEC,
            E::Format { .. } => exit::MISSING_INPUT,
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => exit::MISSING_INPUT,
            E::Divergence { .. } => exit::NUMERIC,
            _ => exit::FAILURE,
        };
        Self::new(code, e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        let code = if e.kind() == std::io::ErrorKind::NotFound { exit::MISSING_INPUT } else { exit::FAILURE };
        Self::new(code, e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new(exit::FAILURE, e)
    }
}

pub(crate) trait ResultExt<T> {
    fn with_context<M: fmt::Display + Send + Sync + 'static>(self, message: impl FnOnce() -> M) -> CliResult<T>;
}

impl<T, E: Into<CliError>> ResultExt<T> for std::result::Result<T, E> {
    fn with_context<M: fmt::Display + Send + Sync + 'static>(self, message: impl FnOnce() -> M) -> CliResult<T> {
        self.map_err(|e| e.into().context(message()))
    }
}
