//! Error type shared across the workspace.
//!
//! Variants are grouped by how the CLI reports them: configuration mistakes
//! (exit code 2), artifact and digest problems (exit code 3), and numerical
//! failures (exit code 4). Library callers match on the variants directly.

use std::path::PathBuf;

use thiserror::Error;

/// All failures produced by this crate.
#[derive(Debug, Error)]
pub enum ModeError {
    // --- artifact format errors ---
    #[error("{path}: bad magic: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated payload: needed {needed} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        needed: u64,
        found: u64,
    },

    #[error("{path}: {extra} trailing bytes after payload")]
    TrailingBytes { path: PathBuf, extra: u64 },

    #[error("{path}: stored digest {expected} does not match recomputed {actual}")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("missing artifacts: {0:?}")]
    MissingArtifacts(Vec<PathBuf>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    // --- configuration / shape errors ---
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: {left} vs {right}")]
    DimensionMismatch {
        context: String,
        left: usize,
        right: usize,
    },

    #[error("shape mismatch in {context}: {left} vs {right}")]
    ShapeMismatch {
        context: String,
        left: String,
        right: String,
    },

    #[error("{rows} rows is not enough for k = {k}")]
    InsufficientRows { rows: usize, k: usize },

    #[error("no metadata rows")]
    EmptyMetadata,

    #[error("condition {condition} has an empty shard")]
    EmptyShard { condition: u32 },

    #[error(
        "metadata embedding source (tag {metadata}) differs from cluster center source \
         (tag {centers}); pass the mismatch override to route anyway"
    )]
    SourceMismatch { metadata: u8, centers: u8 },

    // --- numerical failures ---
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("non-finite loss at step {step} (loss = {loss})")]
    NonFiniteLoss { step: u64, loss: f64 },
}

impl ModeError {
    /// Process exit code the CLI maps this error to.
    ///
    /// 2 = configuration error, 3 = artifact/digest error, 4 = numerical
    /// failure. Success is 0 and never reaches this function.
    pub fn exit_code(&self) -> i32 {
        use ModeError::*;
        match self {
            BadMagic { .. }
            | VersionMismatch { .. }
            | TruncatedPayload { .. }
            | TrailingBytes { .. }
            | DigestMismatch { .. }
            | MissingArtifacts(_)
            | Io(_) => 3,
            Config(_)
            | DimensionMismatch { .. }
            | ShapeMismatch { .. }
            | InsufficientRows { .. }
            | EmptyMetadata
            | EmptyShard { .. }
            | SourceMismatch { .. } => 2,
            NonFinite { .. } | NonFiniteLoss { .. } => 4,
        }
    }
}
