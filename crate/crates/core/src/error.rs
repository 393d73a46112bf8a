use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("activation cache was recorded at parameter version {cached} but the store is at version {current}")]
    StaleCache { cached: u64, current: u64 },

    #[error("mask for subnetwork {subnetwork} overlaps claimed weights at layer {layer}, index {index}")]
    MaskOverlap {
        subnetwork: usize,
        layer: usize,
        index: usize,
    },

    #[error("mask for subnetwork {subnetwork} has {actual} weights in layer {layer}, quota is {expected}")]
    QuotaViolation {
        subnetwork: usize,
        layer: usize,
        expected: usize,
        actual: usize,
    },

    #[error("quota {quota} exceeds the {available} available weights in layer {layer}")]
    QuotaExceedsAvailability {
        layer: usize,
        quota: usize,
        available: usize,
    },

    #[error("training diverged ({context}): loss is not finite")]
    Diverged { context: String },

    #[error("label {label} outside class range 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("bad magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated data at byte offset {offset}: {detail}")]
    Truncated { offset: u64, detail: String },

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("checkpoint is not a subnetens checkpoint (magic mismatch)")]
    CheckpointMagic,

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch: contents are corrupted")]
    ChecksumMismatch,

    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
