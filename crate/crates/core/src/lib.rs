//! Place-value arithmetic laboratory: dataset rendering in three string
//! formats, a small decoder-only transformer trained from scratch, exact-match
//! evaluation, gradient saliency and a few-shot client for remote completion
//! endpoints.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below pick the two
//! precisions used in practice.

pub mod datagen;
pub mod eval;
pub mod format;
pub mod kv;
pub mod model;
pub mod optim;
pub mod remote;
pub mod scalar;
pub mod tokenizer;
pub mod train;

pub use scalar::{DType, Scalar};

/// Single precision, used for training and evaluation.
pub type Model32 = model::Model<f32>;
/// Double precision, used for gradient checks and bit-exact resume tests.
pub type Model64 = model::Model<f64>;
pub type Checkpoint32 = model::Checkpoint<f32>;
pub type Checkpoint64 = model::Checkpoint<f64>;
