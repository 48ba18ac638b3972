//! Core library for training and serving clustered contrastive data experts.
//!
//! The pipeline proceeds in four stages:
//!
//! 1. [`clustering`] — a paired image/caption corpus is clustered by its
//!    caption embeddings with two-step balanced spherical k-means: a fine
//!    step over a corpus sample, then a coarse step over the fine centers.
//!    Each coarse cluster defines one training condition (a data shard).
//! 2. [`trainer`] — a shared seed model is partially trained on the full
//!    corpus, then one two-tower contrastive expert per condition branches
//!    from the seed and specializes on its shard.
//! 3. [`router`] — at inference, task metadata embeddings are compared
//!    against the fine cluster centers to produce per-expert routing
//!    weights, and expert outputs are ensembled under those weights.
//! 4. [`eval`] — a synthetic paired corpus with known ground truth drives
//!    zero-shot classification, cross-modal retrieval, linear probes, and a
//!    matrix of ablation arms.
//!
//! [`embed`] holds the dense row-major embedding store shared by every
//! stage, and [`pipeline`] ties the stages into resumable, digest-checked
//! artifact directories for the CLI.
//!
//! Heavy kernels are data-parallel via rayon when the `parallel` feature
//! (on by default) is enabled; every kernel also has a sequential fallback
//! that produces bit-identical output, so fixed seeds give bit-identical
//! artifacts regardless of thread count.

pub mod clustering;
pub mod embed;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod nn;
pub mod pipeline;
pub mod router;
pub mod stream;
pub mod synth;
pub mod trainer;

pub use embed::{DistanceKind, EmbeddingMatrix};
pub use error::ModeError;
pub use kernels::Mat64;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, ModeError>;
