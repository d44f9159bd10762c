//! Crate-wide error type.

use std::fmt;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Unified error for tensor math, model configuration, file formats and
/// pipeline state.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    Shape { op: &'static str, detail: String },
    /// A structural or numeric configuration value is invalid.
    Config(String),
    /// A buffer length does not match the shape it claims to carry.
    DataLength { expected: usize, got: usize },
    /// A computation produced NaN or infinity at the named stage.
    NonFinite { stage: String },
    /// An operation that needs at least one element received none.
    Empty(&'static str),
    /// A ground-truth displacement field was requested for a frame pair
    /// the clip cannot provide.
    MissingFlow { target: usize, reference: usize },
    /// A gradient tape was asked to run backward twice.
    TapeConsumed,
    /// Parameters have never been trained but the operation requires a
    /// trained checkpoint.
    UntrainedParams,
    /// A text or binary artifact failed to parse.
    Format(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape volume {expected}")
            }
            Error::NonFinite { stage } => write!(f, "non-finite value produced in {stage}"),
            Error::Empty(what) => write!(f, "empty input: {what}"),
            Error::MissingFlow { target, reference } => {
                write!(f, "no displacement field available for frames {target} -> {reference}")
            }
            Error::TapeConsumed => write!(f, "gradient tape already consumed by backward"),
            Error::UntrainedParams => {
                write!(f, "parameters are untrained; run training or load a checkpoint first")
            }
            Error::Format(msg) => write!(f, "malformed artifact: {msg}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
