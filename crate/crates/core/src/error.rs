use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {left} vs {right}")]
    GridMismatch { left: String, right: String },

    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("coordinate ({x}, {y}, {z}) outside grid {dims:?}")]
    OutOfRange {
        x: usize,
        y: usize,
        z: usize,
        dims: [usize; 3],
    },

    #[error("data length {actual} does not match expected {expected}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("label value {value} at voxel index {index} outside [0, 1]")]
    LabelRange { index: usize, value: f64 },

    #[error("negative uncertainty {value} at index {index}")]
    NegativeUncertainty { index: usize, value: f64 },

    #[error("label volume is not binary (value {value} at index {index})")]
    NotBinary { index: usize, value: f64 },

    #[error("sample set is empty")]
    EmptySampleSet,

    #[error("uncertainty kind mismatch: {0}")]
    KindMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("structures {first} and {second} overlap at voxel index {index}")]
    StructureOverlap {
        first: usize,
        second: usize,
        index: usize,
    },

    #[error("registration diverged at level {level}, iteration {iteration}")]
    Divergence { level: usize, iteration: usize },

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: String },

    #[error("non-finite gradient for {param}")]
    NonFiniteGradient { param: String },

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("degenerate correlation: {0}")]
    DegenerateCorrelation(String),

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("header line {line}: {message}")]
    Header { line: usize, message: String },

    #[error("payload length: expected {expected} bytes, got {actual}")]
    PayloadLength { expected: usize, actual: usize },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("{0}")]
    Parse(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("internal: {0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Divergence { .. }
            | Error::NonFiniteActivation { .. }
            | Error::NonFiniteGradient { .. }
            | Error::NonFiniteLoss { .. }
            | Error::DegenerateCorrelation(_)
            | Error::Internal(_) => ErrorClass::Numerical,
            Error::Config { .. } => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }
}
