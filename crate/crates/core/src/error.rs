use std::path::PathBuf;

/// Errors raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (dimension mismatch, out of range argument, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A file could not be decoded. `location` is a line/column or byte offset when known.
    #[error("parse error in {path}{location}: {message}")]
    Parse {
        path: String,
        location: String,
        message: String,
    },

    /// Decoded data broke a structural invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl std::fmt::Display, location: impl Into<String>, message: impl Into<String>) -> Self {
        let location = location.into();
        Error::Parse {
            path: path.to_string(),
            location: if location.is_empty() {
                location
            } else {
                format!(" at {location}")
            },
            message: message.into(),
        }
    }
}
