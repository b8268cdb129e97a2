//! Fuzzy span extraction: fuzzy boundary targets, a KL-augmented boundary
//! loss, and span-bounded attention with a learnable span fraction, plus a
//! small trainable encoder, a synthetic corpus, and experiment harnesses.
//!
//! The numeric core is generic over [`scalar::Scalar`]; the aliases below fix
//! the scalar used by the training stack.

pub mod attention;
pub mod boundary;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};

/// Scalar type used by the concrete aliases and the training stack.
pub type F = f64;

pub type FuzzyConfig = boundary::FuzzyConfig<F>;
pub type BoundaryDistribution = boundary::BoundaryDistribution<F>;
pub type LossConfig = loss::LossConfig<F>;
pub type BoundaryLogits = loss::BoundaryLogits<F>;
pub type SpanModel = model::SpanModel<F>;
pub type Checkpoint = model::Checkpoint<F>;
