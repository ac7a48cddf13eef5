use std::fmt;

/// Errors surfaced by library operations.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    ShapeMismatch(String),
    /// An operation produced a non-finite value (overflow, division blowup).
    NonFinite { context: String },
    /// A configuration value violates a documented constraint.
    InvalidConfig(String),
    /// Checkpoint or metrics I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
