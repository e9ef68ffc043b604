use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to the operation's rules.
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    /// An object is in a state that does not allow the requested operation.
    #[error("invalid state: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// Geometry too degenerate to measure (points collapse onto one coordinate).
    #[error("degenerate size: {0}")]
    DegenerateSize(String),

    /// Training produced a non-finite value.
    #[error("numeric abort: {0}")]
    Numeric(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
