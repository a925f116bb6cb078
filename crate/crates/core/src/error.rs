use std::io;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown word `{0}`")]
    UnknownWord(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("question must not be empty")]
    EmptyQuestion,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("kv cache overflow: {needed} positions requested, capacity {capacity}")]
    CacheOverflow { needed: usize, capacity: usize },

    #[error("attention policy violation: {0}")]
    PolicyViolation(String),

    #[error("no loss-flagged positions")]
    NoLossPositions,

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("gradient check failed for `{tensor}` at coordinate {coord}: relative error {rel_err:e}")]
    GradCheckFailure {
        tensor: String,
        coord: usize,
        rel_err: f64,
    },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("unparseable prompt `{0}`")]
    UnparseablePrompt(String),

    #[error("config error (line {line}): {msg}")]
    Config { line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing required config key `{0}`")]
    MissingKey(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
