use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::nn::params::{FreezePlan, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// Adam restricted to the groups a [`FreezePlan`] marks trainable.
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients for parameters outside the plan are
    /// ignored. Returns the pre-clip global gradient norm.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        plan: &FreezePlan,
        grads: &[(ParamId, Tensor<T>)],
        lr: f64,
    ) -> f64 {
        self.step += 1;
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt();
        let clip = match self.config.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (b1t, b2t, eps) = (T::c(b1), T::c(b2), T::c(self.config.eps));
        let (clip_t, step_t, bc2_t) = (T::c(clip), T::c(lr / bc1), T::c(bc2));
        for (id, g) in grads {
            if !plan.is_trainable(store.group(*id)) {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.get_mut(*id);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gc = gv * clip_t;
                *mv = b1t * *mv + (T::one() - b1t) * gc;
                *vv = b2t * *vv + (T::one() - b2t) * gc * gc;
                *pv -= step_t * *mv / ((*vv / bc2_t).sqrt() + eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamGroup;
    use crate::nn::Ctx;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.push("x", ParamGroup::PoseExtractor, Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let plan = FreezePlan::phase1();
        let mut opt = Adam::new(AdamConfig {
            clip_norm: None,
            ..AdamConfig::default()
        });
        for _ in 0..3000 {
            let grads = {
                let mut ctx = Ctx::training(&store, &plan);
                let x = ctx.p(id);
                let t = ctx.constant(Tensor::new(&[2], vec![0.5, 0.25]).unwrap());
                let l = ctx.mse(x, t).unwrap();
                ctx.param_grads(l).unwrap()
            };
            opt.step(&mut store, &plan, &grads, 1e-2);
        }
        let x = store.get(id).data();
        assert!((x[0] - 0.5).abs() < 1e-3 && (x[1] - 0.25).abs() < 1e-3, "{x:?}");
    }
}
