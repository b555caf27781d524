use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Betas linear in `t`, rescaled by `1000 / T` so short schedules still
    /// end near pure noise.
    Linear,
    /// Squared-cosine `ᾱ` with offset `s = 0.008`.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Linear => NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end),
            ScheduleKind::Cosine => NoiseSchedule::cosine(self.steps),
        }
    }
}

const MAX_BETA: f64 = 0.999;

/// Cumulative signal fractions `ᾱ_1 .. ᾱ_T`, strictly decreasing in
/// `(0, 1]` with `ᾱ_T < 0.01`. By convention `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_alphas_bar(alphas_bar: Vec<f64>) -> Result<Self> {
        if alphas_bar.is_empty() {
            return Err(Error::invalid("schedule needs at least one timestep"));
        }
        if alphas_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::invalid("ᾱ must lie in (0, 1]"));
        }
        if alphas_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("ᾱ must be strictly decreasing"));
        }
        if *alphas_bar.last().unwrap() >= 1e-2 {
            return Err(Error::invalid("final ᾱ must be below 0.01"));
        }
        Ok(Self { alphas_bar })
    }

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::invalid("schedule needs T >= 1"));
        }
        if !(beta_start > 0.0 && beta_end >= beta_start && beta_end < 1.0) {
            return Err(Error::invalid("need 0 < beta_start <= beta_end < 1"));
        }
        let scale = 1000.0 / steps as f64;
        let betas = (0..steps).map(|i| {
            let b = if steps == 1 {
                beta_end
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            };
            (b * scale).min(MAX_BETA)
        });
        Self::from_betas(betas)
    }

    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(Error::invalid("schedule needs T >= 1"));
        }
        let s = 0.008;
        let f = |t: f64| (((t / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let betas = (1..=steps).map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(MAX_BETA));
        Self::from_betas(betas)
    }

    fn from_betas(betas: impl Iterator<Item = f64>) -> Result<Self> {
        let mut acc = 1.0;
        let alphas_bar = betas
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self::from_alphas_bar(alphas_bar)
    }

    /// Number of timesteps `T`.
    pub fn len(&self) -> usize {
        self.alphas_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas_bar.is_empty()
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    /// `ᾱ_t` for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_bar[t - 1]
        }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.len() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.len())));
        }
        Ok(())
    }
}

/// `z_t = sqrt(ᾱ_t) z0 + sqrt(1 - ᾱ_t) eps`.
pub fn forward_diffuse<T: Scalar>(z0: &Tensor<T>, t: usize, eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    schedule.check_t(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::shape("noise", z0.shape(), eps.shape()));
    }
    let a = schedule.alpha_bar(t);
    let (sa, sn) = (T::c(a.sqrt()), T::c((1.0 - a).sqrt()));
    z0.zip_map(eps, |z, e| sa * z + sn * e)
}

/// Per-frame variant: `ts[f]` is the timestep of frame `f` along axis 0.
pub fn forward_diffuse_frames<T: Scalar>(
    z0: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if z0.shape() != eps.shape() {
        return Err(Error::shape("noise", z0.shape(), eps.shape()));
    }
    if z0.ndim() == 0 || z0.dim(0) != ts.len() {
        return Err(Error::invalid("one timestep per frame required"));
    }
    let per = z0.len() / ts.len();
    let mut out = Vec::with_capacity(z0.len());
    for (f, &t) in ts.iter().enumerate() {
        schedule.check_t(t)?;
        let a = schedule.alpha_bar(t);
        let (sa, sn) = (T::c(a.sqrt()), T::c((1.0 - a).sqrt()));
        let r = f * per..(f + 1) * per;
        out.extend(z0.data()[r.clone()].iter().zip(&eps.data()[r]).map(|(&z, &e)| sa * z + sn * e));
    }
    Tensor::new(z0.shape(), out)
}
