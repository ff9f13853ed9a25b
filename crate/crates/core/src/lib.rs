//! Dual-head hierarchical-transformer segmentation.
//!
//! Two segmentation models share the encoder design: an anatomy model with
//! the all-MLP head and a tool model with the dense-skip head. Their outputs
//! are merged per pixel by a confidence-priority rule. Training minimizes a
//! weighted sum of a Tversky loss and cross-entropy.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`); the type
//! aliases below name the concrete instantiations the tools use.

pub mod autograd;
pub mod data;
pub mod decoders;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod kernels;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use mask::{LabelMask, BACKGROUND, IGNORE};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Graph32 = autograd::Graph<f32>;
pub type Graph64 = autograd::Graph<f64>;
pub type SegModel32 = harness::SegModel<f32>;
pub type SegModel64 = harness::SegModel<f64>;
