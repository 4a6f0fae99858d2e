use std::path::PathBuf;

use crate::volume::Dims;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("incompatible grids: expected {expected}, found {found}")]
    DimensionMismatch { expected: Dims, found: Dims },

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("axis {axis} has {len} voxel(s); at least 2 are required")]
    AxisTooShort { axis: usize, len: usize },

    #[error("data length {found} does not match {dims} ({expected} voxels)")]
    LengthMismatch { dims: Dims, expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("stage {stage} ({alpha}), patch {patch}: {source}")]
    Patch {
        stage: usize,
        alpha: f64,
        patch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(
        "intensities span [{min}, {max}] but must lie within [-0.01, 1.01]; \
         min-max normalize the images to [0, 1] first"
    )]
    NotNormalized { min: f64, max: f64 },

    #[error("registration cancelled")]
    Cancelled,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: format error: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: unsupported datatype code {code}")]
    UnsupportedDatatype { path: PathBuf, code: i16 },

    #[error("{path}: size mismatch: expected {expected} bytes, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// True for failures of the numerical pipeline (as opposed to bad input
    /// or I/O).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } => true,
            Error::Patch { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Format { .. }
                | Error::UnsupportedDatatype { .. }
                | Error::SizeMismatch { .. }
                | Error::Json { .. }
        )
    }
}
