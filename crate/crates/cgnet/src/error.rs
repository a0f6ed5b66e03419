use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("loss undefined: every pixel in the batch carries the ignore label")]
    AllPixelsIgnored,

    #[error("non-finite gradient in parameter '{0}'")]
    NonFiniteGradient(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: malformed data at byte {offset}: {msg}")]
    Format {
        path: String,
        offset: usize,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<String>, offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            msg: msg.into(),
        }
    }
}
