use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Anything that predicts the noise in `z_t` at a timestep shared by all
/// frames.
pub trait NoisePredictor<T: Scalar> {
    fn predict_noise(&self, z_t: &Tensor<T>, t: usize) -> Result<Tensor<T>>;
}

impl<T: Scalar, F: Fn(&Tensor<T>, usize) -> Result<Tensor<T>>> NoisePredictor<T> for F {
    fn predict_noise(&self, z_t: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self(z_t, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    /// DDIM stochasticity; 0 is the deterministic sampler.
    pub eta: f64,
    /// Seeds the extra noise used when `eta > 0`.
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            eta: 0.0,
            seed: 0,
        }
    }
}

/// Descending timesteps `τ_S > ... > τ_1` with `τ_k = ceil(k T / S)`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps > total {
        return Err(Error::invalid(format!("{steps} sampler steps exceed T = {total}")));
    }
    Ok((1..=steps).rev().map(|k| (k * total).div_ceil(steps)).collect())
}

/// One DDIM update from `t` to `t_prev` given the predicted noise. Returns
/// `(z_prev, z0_estimate)`.
pub fn ddim_step<T: Scalar>(
    z_t: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    eta: f64,
    noise: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let a = schedule.alpha_bar(t);
    let ap = schedule.alpha_bar(t_prev);
    let (sa, sn) = (T::c(a.sqrt()), T::c((1.0 - a).sqrt()));
    let z0 = z_t.zip_map(eps, |z, e| (z - sn * e) / sa)?;
    let sigma = eta * ((1.0 - ap) / (1.0 - a)).sqrt() * (1.0 - a / ap).sqrt();
    let dir = T::c((1.0 - ap - sigma * sigma).max(0.0).sqrt());
    let mut prev = z0.zip_map(eps, |x, e| T::c(ap.sqrt()) * x + dir * e)?;
    if sigma > 0.0 {
        let n = noise.ok_or_else(|| Error::invalid("stochastic DDIM step needs noise"))?;
        prev = prev.zip_map(n, |p, e| p + T::c(sigma) * e)?;
    }
    Ok((prev, z0))
}

/// DDIM reverse process from `z_T` to the final `z_0` estimate.
/// `steps = 0` returns `z_T` unchanged.
pub fn sample<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    z_t: &Tensor<T>,
    predictor: &P,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<Tensor<T>> {
    let taus = ddim_timesteps(schedule.len(), config.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut z = z_t.clone();
    for (i, &t) in taus.iter().enumerate() {
        let t_prev = taus.get(i + 1).copied().unwrap_or(0);
        let eps = predictor.predict_noise(&z, t)?;
        if eps.shape() != z.shape() {
            return Err(Error::shape("predicted noise", z.shape(), eps.shape()));
        }
        let noise = (config.eta > 0.0).then(|| Tensor::randn(z.shape(), &mut rng));
        z = ddim_step(&z, &eps, t, t_prev, schedule, config.eta, noise.as_ref())?.0;
    }
    Ok(z)
}
