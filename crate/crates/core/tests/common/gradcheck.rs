//! Central finite differences against backpropagated parameter gradients.

use cfsynth::model::Model;
use cfsynth::nn::{FreezePlan, ParamId};
use cfsynth::pipeline::{loss_and_grads, training_loss, NoiseDraw, TrainExample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// Relative error with a floor so that two vanishing gradients agree.
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(1e-8);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Compares `count` randomly chosen parameter entries, each from a
/// distinct tensor, with every group trainable and temporal layers on.
pub fn sample_gradients(
    model: &mut Model<f64>,
    examples: &[TrainExample<f64>],
    draws: &[NoiseDraw<f64>],
    count: usize,
    seed: u64,
    h: f64,
) -> Vec<GradSample> {
    let plan = FreezePlan::all();
    let (_, grads) = loss_and_grads(model, &plan, examples, draws, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<(ParamId, cfsynth::Tensor<f64>)> = grads;
    let mut out = Vec::with_capacity(count);
    while out.len() < count && !pool.is_empty() {
        let (id, g) = pool.swap_remove(rng.random_range(0..pool.len()));
        let index = rng.random_range(0..g.len());
        let base = model.store.get(id).data()[index];
        let mut loss_at = |v: f64| {
            model.store.get_mut(id).data_mut()[index] = v;
            training_loss(model, examples, draws, true).unwrap()
        };
        let numeric = (loss_at(base + h) - loss_at(base - h)) / (2.0 * h);
        model.store.get_mut(id).data_mut()[index] = base;
        out.push(GradSample {
            param: model.store.name(id).to_string(),
            index,
            analytic: g.data()[index],
            numeric,
        });
    }
    out
}
