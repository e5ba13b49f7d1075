//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("config error{}: {message}", location.as_ref().map(|l| format!(" ({l})")).unwrap_or_default())]
    Config {
        message: String,
        location: Option<String>,
    },

    #[error("non-finite value while evaluating stratum {stratum}: {message}")]
    NonFinite { stratum: usize, message: String },

    #[error("boundary: {0}")]
    Boundary(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("no convergence after {iterations} iterations: {message}")]
    NoConvergence { iterations: usize, message: String },

    #[error("step failure: {0}")]
    StepFailure(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(message: impl Into<String>) -> Self {
        Error::Config {
            message: message.into(),
            location: None,
        }
    }
}
