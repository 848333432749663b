//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarBackward { shape: Vec<usize> },

    #[error("finite-difference probe returned non-finite output at coordinate {coord}")]
    NonFiniteProbe { coord: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("volume extents {extents:?} too small for kernel {kernel:?}")]
    ExtentsTooSmall {
        extents: [usize; 3],
        kernel: [usize; 3],
    },

    #[error("extents {extents:?} not divisible by cumulative stride {required:?}")]
    IndivisibleExtents {
        extents: [usize; 3],
        required: usize,
    },

    #[error("CT normalization scheme requires per-channel stats (mu_g, sigma_g, p0_5)")]
    MissingCtStats,

    #[error("unknown normalization scheme tag: {0:?}")]
    UnknownScheme(String),

    #[error("payload holds {actual} values but header declares {expected}")]
    PayloadSizeMismatch { expected: usize, actual: usize },

    #[error("geometry does not fit in extents {extents:?}: {reason}")]
    GeometryDoesNotFit {
        extents: [usize; 3],
        reason: String,
    },

    #[error("empty volume set")]
    EmptyVolumeSet,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("no coarse counterpart for window {window:?}")]
    MissingCoarseCounterpart { window: [usize; 3] },

    #[error("empty mask: surface metrics are undefined")]
    EmptyMask,

    #[error("degenerate axis {name:?}: max equals min across methods")]
    DegenerateAxis { name: String },

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
