use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad arguments or configuration.
    Usage,
    /// Malformed or inconsistent input data.
    Data,
    /// Divergence, non-convergence, singular systems.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("duplicate entry at ({row}, {col})")]
    DuplicateEntry { row: usize, col: usize },

    #[error("index ({row}, {col}) out of range for a {n_rows}x{n_cols} matrix")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        n_rows: usize,
        n_cols: usize,
    },

    #[error("index overflow: {0}")]
    IndexOverflow(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("co-occurrence pair count {projected} exceeds the cap of {cap}")]
    PairCapExceeded { projected: u128, cap: u64 },

    #[error(
        "gradient descent diverged at iteration {iteration} (loss = {loss}); try a smaller learning rate"
    )]
    Diverged { iteration: usize, loss: f64 },

    #[error("{what} did not converge within {iterations} iterations")]
    NotConverged { what: &'static str, iterations: usize },

    #[error("singular normal equations for row {row}; raise the ridge or use the pseudo-inverse fallback")]
    SingularRow { row: usize },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidParameter(_) => ErrorClass::Usage,
            Error::Io(_)
            | Error::MalformedLine { .. }
            | Error::DuplicateEntry { .. }
            | Error::IndexOutOfRange { .. }
            | Error::IndexOverflow(_)
            | Error::DimensionMismatch(_)
            | Error::EmptyInput(_)
            | Error::PairCapExceeded { .. }
            | Error::Json(_) => ErrorClass::Data,
            Error::Diverged { .. } | Error::NotConverged { .. } | Error::SingularRow { .. } => {
                ErrorClass::Numerical
            }
        }
    }

    pub(crate) fn malformed(line: usize, message: impl Into<String>) -> Self {
        Error::MalformedLine {
            line,
            message: message.into(),
        }
    }
}
