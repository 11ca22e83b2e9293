use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{}:{line}: {message}", file.display())]
    Parse {
        file: PathBuf,
        line: u64,
        message: String,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Input data violates a structural requirement (alignment, variance, sizes).
    #[error("invalid data: {0}")]
    Data(String),

    /// Invalid configuration or argument combination.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The model parameters are not identified by the available instruments/basis.
    #[error("identification failure: {0}")]
    Identification(String),

    /// A numerical routine failed (singular system, non-convergence).
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(file: impl Into<PathBuf>, line: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            line,
            message: message.into(),
        }
    }

    /// True for failures of the numerical routines rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::Identification(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
