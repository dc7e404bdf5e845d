//! Structural anchor pruning for multi-vector late-interaction indexes.
//!
//! Visual document retrievers store one vector per image patch. This crate
//! shrinks such indexes by keeping the patches that receive the most
//! attention from other patches in the middle layers of the backbone, and
//! ships the competing baselines plus the evaluation stack needed to compare
//! them: MaxSim ranking, NDCG@k, oracle score retention (OSR), correlation and
//! per-layer sweeps, and a synthetic corpus generator with planted anchors.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32`, `f64`); the aliases
//! below fix the on-disk `f32` element type.

pub mod commands;
pub mod error;
pub mod late_interaction;
pub mod metrics;
pub mod pruning;
pub mod rng;
pub mod scalar;
pub mod store;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{MatrixRef, TensorOf};

pub type Tensor = TensorOf<f32>;
pub type Tensor64 = TensorOf<f64>;
pub type DocumentBundle = store::DocumentBundleOf<f32>;
pub type DocumentBundle64 = store::DocumentBundleOf<f64>;
pub type QueryBundle = store::QueryBundleOf<f32>;
pub type QueryBundle64 = store::QueryBundleOf<f64>;
