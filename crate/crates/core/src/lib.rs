//! Pose-driven human video synthesis with separate control of the
//! foreground subject and the background.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the bottom of this file name the common instantiations.

pub mod autograd;
pub mod checkpoint;
pub mod body_render;
pub mod codec;
pub mod conditioning;
pub mod dataio;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod imaging;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision aliases used for training and synthesis.
pub type TensorF32 = Tensor<f32>;
pub type ModelF32 = model::Model<f32>;
pub type ClipF32 = dataio::ClipRecord<f32>;

/// Double-precision aliases used by oracles and gradient checks.
pub type TensorF64 = Tensor<f64>;
pub type ModelF64 = model::Model<f64>;
pub type ClipF64 = dataio::ClipRecord<f64>;
