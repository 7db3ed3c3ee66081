use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("max pooling needs even spatial dims, got {h}x{w}")]
    OddSpatialDim { h: usize, w: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("bad parameter: {0}")]
    BadParam(String),
    #[error("empty image")]
    EmptyImage,
    #[error("degenerate intensity range (p1 == p99)")]
    DegenerateRange,
    #[error("augmentation is only defined for the train split")]
    NotTrainSplit,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no mask file for image id `{id}`")]
    MissingPair { id: String },
    #[error("cannot read {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("mask {path} is not binary (found value {value})")]
    NonBinaryMask { path: PathBuf, value: u32 },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("field of {n} pixels exceeds the limit of {max}")]
    FieldTooLarge { n: usize, max: usize },
    #[error("input gradient norm {norm:e} is too small to normalize")]
    DegenerateGradient { norm: f64 },

    #[error("McNemar test needs at least one discordant pair")]
    NoDiscordantPairs,

    #[error("checkpoint holds variant `{found}` but `{expected}` was requested")]
    VariantMismatch { expected: String, found: String },
    #[error("training produced a non-finite value at step {step}")]
    TrainingDiverged { step: u64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
