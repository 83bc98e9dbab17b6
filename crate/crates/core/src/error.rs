use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with inputs that break its contract
    /// (shape mismatch, out-of-range argument, ...).
    #[error("{op}: {message}")]
    Contract { op: &'static str, message: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("invalid state: {0}")]
    State(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("path not found: {}", .0.display())]
    MissingPath(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn contract(op: &'static str, message: impl Into<String>) -> Self {
        Error::Contract {
            op,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from user input (config, paths, arguments)
    /// rather than a failure during the run.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::MissingPath(_))
    }
}
