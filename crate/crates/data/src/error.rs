use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {detail}")]
    Decode { path: PathBuf, detail: String },
    #[error("CSV error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid corpus: {0}")]
    Corpus(String),
    #[error(transparent)]
    Core(#[from] sdflow_core::Error),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io { path: path.into(), source }
    }

    /// True for errors caused by the file system rather than by arguments.
    pub fn is_io(&self) -> bool {
        matches!(self, DataError::Io { .. } | DataError::Decode { .. } | DataError::Csv { .. })
    }
}
