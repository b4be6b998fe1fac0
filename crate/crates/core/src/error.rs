//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the crate.
///
/// Variants are grouped by how a caller should react, which is what the CLI
/// exit-code mapping keys off: configuration and usage mistakes, bad data,
/// and runtime/numeric faults.
#[derive(Debug)]
pub enum Error {
    /// Tensor dimension mismatch; message names both shapes.
    Shape(String),
    /// NaN/divergence or other numeric breakdown.
    Numeric(String),
    /// Invalid hyperparameter or task specification.
    Config(String),
    /// API misuse (non-scalar loss, empty prompt, unknown technique, ...).
    Usage(String),
    /// Every target position in a criteria batch is padding.
    EmptyCriteria,
    /// Malformed or inconsistent dataset content.
    Data(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// Checkpoint file is truncated, version-mismatched or inconsistent.
    Checkpoint(String),
    /// Toxicity scorer failure (local or remote).
    Scoring(String),
    /// Good/bad batches are not index-aligned.
    Pairing(String),
    /// Two models that must share a configuration do not.
    ModelMismatch(String),
    /// Inconsistent cost-accounting events.
    Accounting(String),
}

impl Error {
    /// Process exit code the CLI maps this error to.
    /// 2 = usage/config, 3 = data, 4 = runtime/numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Checkpoint(_) | Error::EmptyCriteria
            | Error::Pairing(_) => 3,
            Error::Shape(_) | Error::Numeric(_) | Error::Scoring(_) | Error::ModelMismatch(_)
            | Error::Accounting(_) => 4,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::EmptyCriteria => write!(f, "empty criteria: every target position is padding"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
            Error::Checkpoint(msg) => write!(f, "corrupt checkpoint: {msg}"),
            Error::Scoring(msg) => write!(f, "scoring error: {msg}"),
            Error::Pairing(msg) => write!(f, "pairing error: {msg}"),
            Error::ModelMismatch(msg) => write!(f, "model mismatch: {msg}"),
            Error::Accounting(msg) => write!(f, "accounting error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}
