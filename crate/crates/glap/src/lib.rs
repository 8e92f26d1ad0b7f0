//! Desk-scale contrastive language-audio pretraining.
//!
//! The crate trains a pair of small towers (audio and text) so that
//! matching audio/caption pairs score high cosine similarity and
//! mismatched pairs score low, using a pairwise sigmoid objective with a
//! learnable temperature and bias (an InfoNCE baseline is included for
//! comparison). Everything is CPU-only and deterministic: fixed seeds
//! produce byte-identical checkpoints, metrics, and reports.
//!
//! Layout:
//! - [`embedding`]: dense vectors, L2 normalization, cosine similarity
//!   grids, and the diagonal sign pattern the loss consumes.
//! - [`loss`]: sigmoid pairwise loss and symmetric InfoNCE, with analytic
//!   gradients and a finite-difference gradient checker.
//! - [`model`]: toy encoders, projection heads, and checkpoint I/O.
//! - [`data`]: manifest parsing, feature tensors, and batch samplers.
//! - [`train`]: Adam, warmup-cosine schedule, and the training loop.
//! - [`eval`]: retrieval metrics and zero-shot classification.
//!
//! Numerics convention: parameters, features, embeddings, and similarity
//! scores are stored as `f32`; all reductions, losses, and gradients are
//! computed in f64.

pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod train;

pub mod cli;

pub use error::{GlapError, Result};
