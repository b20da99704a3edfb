use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid shape {shape:?} is not invariant under axis permutation {perm:?}")]
    ShapeNotInvariant { shape: [usize; 3], perm: [usize; 3] },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    InvalidFractions([f64; 3]),

    #[error("labeled fraction {0} must lie in (0, 1]")]
    InvalidFraction(f64),

    #[error("mask ratio {0} exceeds the 0.85 limit")]
    MaskRatioTooHigh(f64),

    #[error("invalid augmentation config: {0}")]
    InvalidAugmentation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: field `{field}`: {detail}")]
    Format {
        path: PathBuf,
        field: String,
        detail: String,
    },

    #[error("non-finite activation after layer `{0}`")]
    NonFiniteActivation(String),

    #[error("token grid dims {0:?} must all be even for patch merging")]
    OddShape([usize; 3]),

    #[error("window {window:?} does not divide token grid {grid:?}")]
    WindowMismatch { window: [usize; 3], grid: [usize; 3] },

    #[error("parameter key mismatch: {0}")]
    KeyMismatch(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("labeled training set is empty")]
    EmptyLabeledSet,

    #[error("missing run record in {0}")]
    MissingRecord(PathBuf),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        path: impl Into<PathBuf>,
        field: impl Into<String>,
        detail: impl Into<String>,
    ) -> Self {
        Error::Format {
            path: path.into(),
            field: field.into(),
            detail: detail.into(),
        }
    }
}
