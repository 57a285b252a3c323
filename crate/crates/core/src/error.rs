use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in layer {layer}: {detail}")]
    Numeric { layer: usize, detail: String },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("ill-conditioned covariance: {0}")]
    Conditioning(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{location}: {detail}")]
    Parse { location: String, detail: String },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            detail: detail.into(),
        }
    }
}
