use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("affine transform is singular (|det| = {det:e})")]
    SingularTransform { det: f64 },

    #[error("invalid affine matrix: {0}")]
    InvalidAffine(String),

    #[error("data length {actual} does not match grid size {expected}")]
    DataLength { expected: usize, actual: usize },

    #[error("non-finite intensity at linear index {index}")]
    NonFinite { index: usize },

    #[error("label {value} out of range for {num_labels} labels")]
    LabelOutOfRange { value: u64, num_labels: u16 },

    #[error("label count must be at least 2, got {0}")]
    InvalidLabelCount(u16),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("volume has zero total mass")]
    ZeroMass,

    #[error("zero intensity variance: {0}")]
    ZeroVariance(String),

    #[error("mask selects no voxels")]
    EmptyMask,

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("NIfTI format error: {0}")]
    NiftiFormat(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("truncated data section: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("dimension {0} does not fit in a signed 16-bit header field")]
    DimsOverflow(usize),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed document {}: {message}", path.display())]
    Document { path: PathBuf, message: String },

    #[error("tiling: {0}")]
    Tiling(String),

    #[error("tile {tile}: {source}")]
    Tile {
        tile: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("external segmenter failed ({status}): {stderr}")]
    ExternalProcess { status: String, stderr: String },

    #[error("backend: {0}")]
    Backend(String),

    #[error("fusion: {0}")]
    Fusion(String),

    #[error("configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn document(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Document {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
