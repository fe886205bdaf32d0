use std::path::PathBuf;

use crate::tensor::Shape;

/// Unified error type for the engine.
///
/// `NonFinite` is the only variant signalling numerical divergence at run
/// time; everything else is an input, configuration, or I/O problem.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },

    #[error("bad shape in {op}: {shape}: {reason}")]
    BadShape { op: &'static str, shape: Shape, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("manifest {path}: line {line}: {reason}")]
    Manifest { path: PathBuf, line: usize, reason: String },

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("mask {path}: pixel ({x},{y}) has value {value}, expected one of the configured label codes")]
    MaskValue { path: PathBuf, x: u32, y: u32, value: u8 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("autodiff tape: {0}")]
    Tape(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn non_finite(what: impl Into<String>) -> Self {
        Error::NonFinite(what.into())
    }

    /// True when the error reports numerical divergence rather than bad input.
    pub fn is_non_finite(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
