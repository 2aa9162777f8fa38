use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Malformed WAV, spectrogram cache or checkpoint file.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("utterance too short: {samples} samples, need at least {required}")]
    TooShort { samples: usize, required: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest error at line {line}: {message}")]
    Manifest { line: u64, message: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("import error: {}", .0.join("; "))]
    Import(Vec<String>),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite parameter after optimizer step {step}")]
    NonFinite { step: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
