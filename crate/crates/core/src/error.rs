use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the brain-extraction toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDtype(i16),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("truncated data: expected {expected} bytes, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error("value {value} does not fit the {dtype} storage type")]
    RangeOverflow { value: f64, dtype: &'static str },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("degenerate affine: {0}")]
    DegenerateAffine(String),
    #[error("bounding box {lo:?}..{hi:?} does not fit inside dims {dims:?}")]
    BoxOutOfRange {
        lo: [usize; 3],
        hi: [usize; 3],
        dims: [usize; 3],
    },
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("image has zero variance")]
    ZeroVariance,
    #[error("bias correction needs strictly positive foreground intensities")]
    NonPositiveIntensities,
    #[error("bias-field design matrix is rank deficient")]
    SingularFit,
    #[error("slice merge needs at least 3 slices along the merge axis, found {0}")]
    TooFewSlices(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("gradient for parameter {0} is not finite")]
    NonFiniteGradient(String),
    #[error("mask has no voxel at or above the threshold")]
    NoForeground,
    #[error("phantom geometry infeasible: {0}")]
    SpecInfeasible(String),
    #[error("invalid weights file: {0}")]
    InvalidWeights(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty dataset")]
    EmptyDataset,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
