use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the toolkit.
///
/// Variants are grouped so that callers (the CLI in particular) can map
/// them onto distinct exit codes: bad input data, invalid arguments and
/// numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{row}: {message}")]
    DataRow {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn row(path: &std::path::Path, row: usize, message: impl Into<String>) -> Self {
        Error::DataRow {
            path: path.to_path_buf(),
            row,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True for failures caused by the input data rather than by arguments
    /// or numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::DataRow { .. } | Error::Data(_) | Error::Io { .. } | Error::Csv(_) | Error::Json(_)
        )
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
