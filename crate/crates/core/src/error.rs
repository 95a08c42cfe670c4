use std::fmt;

/// Errors raised by tensor operations and the model layers built on them.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Dimension/channel mismatch or an otherwise impossible shape.
    Shape(String),
    /// An operation produced a non-finite value (NaN or infinity).
    Numeric(String),
    /// A learnable parameter violates its constraints.
    Param(String),
    /// Caller-supplied data is invalid (boxes, thresholds, config values).
    Input(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Param(msg) => write!(f, "parameter error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;
