use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("selection error: requested {requested} points from a map of {available}")]
    Selection { requested: usize, available: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("dataset write error at {}: {source}", path.display())]
    DatasetWrite {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("image error at {}: {message}", path.display())]
    Image { path: PathBuf, message: String },
    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),
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
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
