use std::fmt;
use std::io;

/// Error type shared across the crate.
#[derive(Debug)]
pub enum CamlError {
    /// Tensor shapes incompatible with the requested operation.
    Shape(String),
    /// Unknown kernel name passed to the dynamic dispatcher.
    UnknownOp(String),
    /// Invalid configuration value or malformed config file.
    Config(String),
    /// Malformed or truncated on-disk artifact (volume, label, manifest, checkpoint).
    Format(String),
    /// The auxiliary branch needs at least two samples to attend across the batch.
    BatchSize(usize),
    /// A loss scalar went non-finite; training aborts rather than masking it.
    NonFinite { iteration: usize, term: &'static str },
    /// Surface metrics are undefined when a mask is empty.
    EmptySurface(&'static str),
    Io(io::Error),
}

impl fmt::Display for CamlError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CamlError::Shape(msg) => write!(f, "shape error: {msg}"),
            CamlError::UnknownOp(op) => write!(f, "unknown op id: {op}"),
            CamlError::Config(msg) => write!(f, "config error: {msg}"),
            CamlError::Format(msg) => write!(f, "format error: {msg}"),
            CamlError::BatchSize(b) => write!(
                f,
                "cross-sample attention requires a batch size larger than 1, got {b}"
            ),
            CamlError::NonFinite { iteration, term } => {
                write!(f, "non-finite {term} at iteration {iteration}; aborting run")
            }
            CamlError::EmptySurface(which) => {
                write!(f, "surface metrics undefined: {which} mask has no foreground")
            }
            CamlError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for CamlError {}

impl From<io::Error> for CamlError {
    fn from(e: io::Error) -> Self {
        CamlError::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, CamlError>;
