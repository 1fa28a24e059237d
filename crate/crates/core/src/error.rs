use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape, range or emptiness violation on an operation's inputs.
    #[error("invalid input: {0}")]
    Input(String),

    /// A non-finite value showed up where a finite one is required.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("aggregation failed: {0}")]
    Aggregation(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed dataset or results file. `record` is zero-based.
    #[error("parse error in {path} at record {record}: {message}")]
    Parse {
        path: PathBuf,
        record: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("pipeline error: {0}")]
    Pipeline(String),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
