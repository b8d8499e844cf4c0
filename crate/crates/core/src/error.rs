use thiserror::Error;

/// Errors raised by tensor ops, transforms, losses and the training engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {0}")]
    NonFiniteResult(&'static str),
    #[error("kernel extent {0} must be odd and at least 3")]
    EvenKernel(usize),
    #[error("bandwidth must be positive, got {0}")]
    NonPositiveBandwidth(f64),
    #[error("empty tensor passed to {0}")]
    EmptyTensor(&'static str),
    #[error("backward() needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward() already ran on this tape; clear it first")]
    DoubleBackwardUnsupported,
    #[error("distance transform has no source voxel")]
    NoSource,
    #[error("no gradient recorded for parameter {0}")]
    MissingGrad(String),
    #[error("loss term {0} is not finite")]
    NonFiniteLoss(String),
    #[error("sliding window left {0} voxels uncovered")]
    CoverageGap(usize),
    #[error("surface metric undefined for an empty mask")]
    EmptyMask,
    #[error("patch {patch:?} larger than volume {volume:?}")]
    PatchTooLarge {
        patch: [usize; 3],
        volume: [usize; 3],
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
