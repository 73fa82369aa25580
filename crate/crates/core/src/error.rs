use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed NIfTI header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dimensionality: expected a 3D image (or 4D field), got {0}D")]
    UnsupportedDims(usize),
    #[error("I/O failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("patch {patch:?} does not fit volume {volume:?}")]
    PatchTooLarge { patch: [usize; 3], volume: [usize; 3] },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spatial shape {shape:?} is not divisible by {divisor}")]
    IndivisibleShape { shape: Vec<usize>, divisor: usize },
    #[error("token length {len} is not divisible by {heads} heads")]
    IndivisibleChannels { len: usize, heads: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("loss diverged at step {step}: {value}")]
    DivergedLoss { step: usize, value: f64 },
    #[error("checkpoint format version {found} does not match expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("segmentation maps are required for this operation")]
    MissingSegmentation,
}

impl From<nifti::NiftiError> for Error {
    fn from(e: nifti::NiftiError) -> Self {
        match e {
            nifti::NiftiError::Io(io) => Error::IoFailure(io),
            other => Error::MalformedHeader(other.to_string()),
        }
    }
}
