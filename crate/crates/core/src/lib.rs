//! Open-set test-time adaptation for batch-normalized classifiers.
//!
//! The adapting model is trained on each incoming batch with an
//! entropy objective gated by two filters: a primary filter driven by the
//! adapting model and an auxiliary filter driven by its exponential moving
//! average. Predictions blend the source, adapting and averaged models with
//! per-sample confidence weights.
//!
//! Numeric code is generic over [`Scalar`] (`f32` / `f64`); the aliases below
//! fix the element type for the common double-precision case.

// Validation is written `!(x > 0)` so NaN fails it; index loops follow the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adaptation;
pub mod error;
pub mod kip;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod stream;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Matrix;

pub type Matrix64 = tensor::Matrix<f64>;
pub type Mlp = nn::LayerStack<f64>;
pub type Mlp32 = nn::LayerStack<f32>;
