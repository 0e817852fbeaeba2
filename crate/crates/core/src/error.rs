use std::path::PathBuf;

use hdan_tensor::TensorError;

use crate::training::Checkpoint;

/// Errors raised anywhere in the segmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: unreadable format: {reason}")]
    UnreadableFormat { path: PathBuf, reason: String },
    #[error("{path}: header carries no usable voxel size")]
    SpacingMissing { path: PathBuf },
    #[error("{path}: voxel intensity {value} is not in the label mapping")]
    UnmappedLabelValue { path: PathBuf, value: f64 },
    #[error("modality {modality}: foreground intensities have zero variance")]
    DegenerateIntensity { modality: usize },
    #[error("no foreground voxels in modality {modality}")]
    EmptyForeground { modality: usize },
    #[error("phantom size {size:?} cannot fit all tissue shells")]
    GeometryUnderflow { size: [usize; 3] },
    #[error("{path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid patch spec: {0}")]
    InvalidPatchSpec(String),
    #[error("patch {patch:?} does not fit in volume {dims:?}")]
    PatchLargerThanVolume { patch: [usize; 3], dims: [usize; 3] },
    #[error("origin {origin:?} with patch {patch:?} leaves volume {dims:?}")]
    OriginOutOfBounds {
        origin: [usize; 3],
        patch: [usize; 3],
        dims: [usize; 3],
    },
    #[error("patch grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bad input shape {shape:?}: {reason}")]
    BadInputShape { shape: Vec<usize>, reason: String },
    #[error("reduction {reduction} does not divide {channels} channels")]
    ReductionMismatch { channels: usize, reduction: usize },
    #[error("transition needs even spatial dims, got {dims:?}")]
    OddDims { dims: Vec<usize> },

    #[error("class histogram is empty")]
    EmptyHistogram,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite training loss at epoch {epoch}")]
    DivergenceDetected {
        epoch: usize,
        last_good: Option<Box<Checkpoint>>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("both masks are empty; Dice is undefined")]
    BothEmpty,
    #[error("mask is empty; it has no boundary")]
    EmptyMask,
    #[error("boundary point set is empty")]
    EmptySet,

    #[error("group {group} has {n} subjects; at least 2 are required")]
    GroupTooSmall { group: String, n: usize },
    #[error("manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::IoFailure {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn unreadable(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::UnreadableFormat {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Self::IoFailure { .. } | Self::DivergenceDetected { .. } | Self::Tensor(_)
        )
    }
}
