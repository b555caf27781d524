//! Noise schedules, the DDIM sampler and the denoising U-Net.

pub mod blocks;
pub mod sampler;
pub mod schedule;
pub mod unet;

pub use sampler::{ddim_step, ddim_timesteps, sample, NoisePredictor, SamplerConfig};
pub use schedule::{forward_diffuse, forward_diffuse_frames, NoiseSchedule, ScheduleConfig, ScheduleKind};
pub use unet::{CondVars, Denoiser, UNetDims, LEVELS};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean squared error between predicted and true noise (unit weighting).
pub fn noise_mse<T: Scalar>(pred: &Tensor<T>, eps: &Tensor<T>) -> Result<f64> {
    if pred.shape() != eps.shape() {
        return Err(Error::shape("predicted noise", eps.shape(), pred.shape()));
    }
    if pred.is_empty() {
        return Err(Error::invalid("empty noise tensors"));
    }
    let sum: f64 = pred.data().iter().zip(eps.data()).map(|(a, b)| (a.f64() - b.f64()).powi(2)).sum();
    Ok(sum / pred.len() as f64)
}
