//! Ship detention prediction on imbalanced inspection data.
//!
//! The pipeline encodes each inspection record as a 2×7 attribute grid, trains
//! a dual robust-subspace-recovery autoencoder through a six-phase schedule of
//! increasing detention prevalence, scores samples by comparing the two branch
//! reconstruction errors, and aggregates scores group-wise through a pluggable
//! ranking backend before thresholding.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below are what the pipeline and CLI use.

pub mod datagen;
pub mod dsrae;
pub mod error;
pub mod eval;
pub mod grouprank;
pub mod metrics;
pub mod numerics;
pub mod progressive;
pub mod scalar;
pub mod schema;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type ModelParams64 = dsrae::ModelParams<f64>;
pub type ModelParams32 = dsrae::ModelParams<f32>;
pub type Sample64 = dsrae::Sample<f64>;
