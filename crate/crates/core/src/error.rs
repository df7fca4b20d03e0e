use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the estimators, the simulator and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("division by zero: {0}")]
    DivisionByZero(String),

    /// A matrix factorization or likelihood evaluation broke down.
    #[error("numerical error{}: {message}", block.map(|b| format!(" at block {b}")).unwrap_or_default())]
    Numerical {
        message: String,
        block: Option<usize>,
    },

    /// Levenberg-Marquardt did not converge; carries the last iterate.
    #[error("fit did not converge after {iterations} iterations (last f = {last_f} Hz)")]
    Fit { iterations: usize, last_f: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical {
            message: msg.into(),
            block: None,
        }
    }

    pub(crate) fn at_block(self, k: usize) -> Self {
        match self {
            Error::Numerical { message, .. } => Error::Numerical {
                message,
                block: Some(k),
            },
            other => other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
