mod common;

use cfsynth::diffusion::blocks::{temporal_attend, TemporalAttention};
use cfsynth::diffusion::sampler::{ddim_timesteps, sample, SamplerConfig};
use cfsynth::diffusion::schedule::{forward_diffuse, forward_diffuse_frames, NoiseSchedule, ScheduleConfig, ScheduleKind};
use cfsynth::diffusion::noise_mse;
use cfsynth::nn::{ParamGroup, ParamStore};
use cfsynth::pipeline::{training_loss, NoiseDraw, TrainExample};
use cfsynth::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn default_schedule() -> NoiseSchedule {
    ScheduleConfig::default().build().unwrap()
}

#[test]
fn linear_schedule_matches_running_product() {
    let s = default_schedule();
    assert_eq!(s.len(), 1000);
    let mut prod = 1.0f64;
    for t in 1..=1000 {
        let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0;
        prod *= 1.0 - beta;
        assert!((s.alpha_bar(t) - prod).abs() < 1e-10, "t = {t}");
    }
    assert_eq!(s.alpha_bar(0), 1.0);
}

#[test]
fn schedules_decrease_and_end_near_noise() {
    for steps in [1, 2, 10, 50, 1000] {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = ScheduleConfig { kind, steps, ..Default::default() }.build().unwrap();
            assert_eq!(s.len(), steps);
            assert!(s.alphas_bar().windows(2).all(|w| w[1] < w[0]));
            assert!(s.alphas_bar().iter().all(|&a| a > 0.0 && a <= 1.0));
            assert!(s.alpha_bar(steps) < 1e-2, "{kind:?} T={steps}");
        }
    }
}

#[test]
fn degenerate_schedules_are_rejected() {
    assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
    assert!(NoiseSchedule::cosine(0).is_err());
    assert!(NoiseSchedule::linear(10, 0.02, 1e-4).is_err());
    assert!(NoiseSchedule::from_alphas_bar(vec![0.5, 0.6, 0.001]).is_err());
    assert!(NoiseSchedule::from_alphas_bar(vec![0.5, 0.1]).is_err());
    assert!(NoiseSchedule::from_alphas_bar(vec![]).is_err());
}

#[test]
fn forward_moments_match_closed_form() {
    // z0 fixed at 2, ᾱ = 0.25: mean sqrt(ᾱ)·2 = 1, variance 1 - ᾱ = 0.75.
    let s = NoiseSchedule::from_alphas_bar(vec![0.25, 0.001]).unwrap();
    let n = 200_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z0 = Tensor::<f64>::full(&[n], 2.0);
    let eps = Tensor::randn(&[n], &mut rng);
    let zt = forward_diffuse(&z0, 1, &eps, &s).unwrap();
    let mean = zt.mean();
    let var = zt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    // Standard errors are about 0.002 and 0.0024.
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    assert!((var - 0.75).abs() < 0.015, "var {var}");
}

#[test]
fn nearly_clean_step_keeps_signal() {
    let s = NoiseSchedule::from_alphas_bar(vec![1.0 - 1e-12, 1e-3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z0 = Tensor::<f64>::randn(&[4, 4, 4], &mut rng);
    let eps = Tensor::randn(&[4, 4, 4], &mut rng);
    let zt = forward_diffuse(&z0, 1, &eps, &s).unwrap();
    assert!(zt.max_abs_diff(&z0) < 1e-5);
}

#[test]
fn zero_signal_is_scaled_noise() {
    let s = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eps = Tensor::<f64>::randn(&[2, 4, 4, 4], &mut rng);
    let z0 = Tensor::zeros(&[2, 4, 4, 4]);
    for t in [1, 250, 1000] {
        let zt = forward_diffuse(&z0, t, &eps, &s).unwrap();
        let k = (1.0 - s.alpha_bar(t)).sqrt();
        assert!(zt.max_abs_diff(&eps.scale(k)) < 1e-15);
    }
}

#[test]
fn timestep_outside_range_is_rejected() {
    let s = default_schedule();
    let z = Tensor::<f64>::zeros(&[2, 3]);
    assert!(forward_diffuse(&z, 0, &z, &s).is_err());
    assert!(forward_diffuse(&z, 1001, &z, &s).is_err());
    assert!(forward_diffuse_frames(&z, &[1, 1001], &z, &s).is_err());
    assert!(forward_diffuse_frames(&z, &[1], &z, &s).is_err());
}

#[test]
fn per_frame_diffusion_matches_single_frame() {
    let s = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z0 = Tensor::<f64>::randn(&[3, 2, 2, 4], &mut rng);
    let eps = Tensor::randn(&[3, 2, 2, 4], &mut rng);
    let ts = [5, 500, 999];
    let all = forward_diffuse_frames(&z0, &ts, &eps, &s).unwrap();
    for (f, &t) in ts.iter().enumerate() {
        let one = forward_diffuse(&z0.index_axis0(f), t, &eps.index_axis0(f), &s).unwrap();
        assert_eq!(all.index_axis0(f), one);
    }
}

#[test]
fn oracle_noise_inverts_in_one_step() {
    let s = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z0 = Tensor::<f64>::randn(&[2, 4, 4, 4], &mut rng);
    let eps = Tensor::randn(&[2, 4, 4, 4], &mut rng);
    let zt = forward_diffuse(&z0, 1000, &eps, &s).unwrap();
    let oracle = |_: &Tensor<f64>, _: usize| Ok(eps.clone());
    let out = sample(&zt, &oracle, &s, &SamplerConfig { steps: 1, ..Default::default() }).unwrap();
    assert!(out.max_abs_diff(&z0) < 1e-5);
}

#[test]
fn sampler_edge_cases() {
    let s = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
    let z = Tensor::<f64>::from_fn(&[2, 2], |i| i as f64);
    let zero = |z: &Tensor<f64>, _: usize| Ok(Tensor::zeros(z.shape()));
    let out = sample(&z, &zero, &s, &SamplerConfig { steps: 0, ..Default::default() }).unwrap();
    assert_eq!(out, z);
    assert!(sample(&z, &zero, &s, &SamplerConfig { steps: 21, ..Default::default() }).is_err());
    let bad = |_: &Tensor<f64>, _: usize| Ok(Tensor::zeros(&[3]));
    assert!(sample(&z, &bad, &s, &SamplerConfig { steps: 2, ..Default::default() }).is_err());
    assert_eq!(ddim_timesteps(20, 20).unwrap(), (1..=20).rev().collect::<Vec<_>>());
}

#[test]
fn stochastic_sampler_is_seeded() {
    let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
    let z = Tensor::<f64>::from_fn(&[8], |i| (i as f64).sin());
    let p = |z: &Tensor<f64>, _: usize| Ok(z.scale(0.5));
    let cfg = SamplerConfig { steps: 10, eta: 1.0, seed: 9 };
    let a = sample(&z, &p, &s, &cfg).unwrap();
    let b = sample(&z, &p, &s, &cfg).unwrap();
    let c = sample(&z, &p, &s, &SamplerConfig { seed: 10, ..cfg }).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

fn temporal_layer(dim: usize, seed: u64) -> (TemporalAttention, ParamStore<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = TemporalAttention::new(&mut store, "t", ParamGroup::DenoiserTemporal, dim, 2, &mut rng);
    // Non-zero output projection so the attention actually contributes.
    let w = Tensor::randn(&[dim, dim], &mut rng).scale(0.5);
    store.set(layer.o.w, w).unwrap();
    (layer, store)
}

#[test]
fn temporal_layer_keeps_shape_for_window_lengths() {
    let (layer, store) = temporal_layer(8, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for f in [1, 2, 8, 24] {
        let x = Tensor::randn(&[f, 3, 2, 8], &mut rng);
        let y = temporal_attend(&x, &layer, &store).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.all_finite());
    }
    assert!(temporal_attend(&Tensor::zeros(&[0, 2, 2, 8]), &layer, &store).is_err());
    assert!(temporal_attend(&Tensor::zeros(&[2, 2, 2, 6]), &layer, &store).is_err());
}

#[test]
fn fresh_temporal_layer_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let layer = TemporalAttention::new(&mut store, "t", ParamGroup::DenoiserTemporal, 8, 2, &mut rng);
    let x = Tensor::randn(&[8, 2, 2, 8], &mut rng);
    assert_eq!(temporal_attend(&x, &layer, &store).unwrap(), x);
}

#[test]
fn temporal_layer_mixes_frames_only() {
    // Changing one spatial position must leave every other position's
    // output untouched, across all frames.
    let (layer, store) = temporal_layer(8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f64>::randn(&[4, 2, 3, 8], &mut rng);
    let y = temporal_attend(&x, &layer, &store).unwrap();
    let mut x2 = x.clone();
    let pos = 4; // (row 1, col 1)
    for f in 0..4 {
        for c in 0..8 {
            x2.data_mut()[(f * 6 + pos) * 8 + c] += 1.0;
        }
    }
    let y2 = temporal_attend(&x2, &layer, &store).unwrap();
    for f in 0..4 {
        for p in 0..6 {
            let r = (f * 6 + p) * 8..(f * 6 + p + 1) * 8;
            let same = y.data()[r.clone()].iter().zip(&y2.data()[r]).all(|(a, b)| (a - b).abs() < 1e-12);
            assert_eq!(same, p != pos, "frame {f} position {p}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_diffusion_preserves_unit_variance(t in 1usize..=1000, seed in any::<u64>()) {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 20_000;
        let z0 = Tensor::<f64>::randn(&[n], &mut rng);
        let eps = Tensor::randn(&[n], &mut rng);
        let zt = forward_diffuse(&z0, t, &eps, &s).unwrap();
        let var = zt.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
        prop_assert!((var - 1.0).abs() < 0.06, "var {}", var);
    }

    #[test]
    fn ddim_timesteps_descend_from_t(total in 1usize..2000, frac in 0.0f64..1.0) {
        let steps = ((total as f64) * frac) as usize;
        let taus = ddim_timesteps(total, steps).unwrap();
        prop_assert_eq!(taus.len(), steps);
        prop_assert!(taus.windows(2).all(|w| w[1] < w[0]));
        if steps > 0 {
            prop_assert_eq!(taus[0], total);
            prop_assert!(*taus.last().unwrap() >= 1);
        }
    }

    #[test]
    fn temporal_output_commutes_with_spatial_permutation(seed in any::<u64>(), shift in 1usize..6) {
        let (layer, store) = temporal_layer(8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = Tensor::<f64>::randn(&[3, 2, 3, 8], &mut rng);
        let roll = |t: &Tensor<f64>| {
            Tensor::from_fn(t.shape(), |i| {
                let (f, p, c) = (i / 48, (i / 8) % 6, i % 8);
                t.data()[(f * 6 + (p + shift) % 6) * 8 + c]
            })
        };
        let a = roll(&temporal_attend(&x, &layer, &store).unwrap());
        let b = temporal_attend(&roll(&x), &layer, &store).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-10);
    }
}

#[test]
fn training_loss_is_mean_squared_noise_error() {
    let model = common::small_model::<f64>(21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let examples: Vec<TrainExample<f64>> = (0..2)
        .map(|i| {
            let mut inputs = common::window_inputs::<f64>(3, 32, 4);
            inputs.background = inputs.background.scale(1.0 + i as f64);
            TrainExample {
                z0: Tensor::randn(&[3, 4, 4, 4], &mut rng),
                inputs,
            }
        })
        .collect();
    let draws: Vec<NoiseDraw<f64>> = examples.iter().map(|e| NoiseDraw::random(e.z0.shape(), 1000, &mut rng)).collect();
    let loss = training_loss(&model, &examples, &draws, false).unwrap();

    // Same quantity through the inference path, with a hand-written mean.
    let mut oracle = 0.0;
    for (ex, d) in examples.iter().zip(&draws) {
        let zt = forward_diffuse_frames(&ex.z0, &d.ts, &d.eps, &model.schedule).unwrap();
        let bundle = model.build_bundle(&ex.inputs).unwrap();
        let pred = model.predict_noise(&zt, &d.ts, &bundle, false).unwrap();
        let mut sum = 0.0;
        for (p, e) in pred.data().iter().zip(d.eps.data()) {
            sum += (p - e) * (p - e);
        }
        oracle += sum / pred.len() as f64;
    }
    oracle /= 2.0;
    assert!((loss - oracle).abs() < 1e-6 * oracle.max(1.0), "{loss} vs {oracle}");
    assert!(loss > 0.0);
}

#[test]
fn noise_mse_edge_cases() {
    let eps = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
    assert_eq!(noise_mse(&eps, &eps).unwrap(), 0.0);
    assert_eq!(noise_mse(&eps.map(|v| v + 2.0), &eps).unwrap(), 4.0);
    assert!(noise_mse(&eps, &Tensor::zeros(&[6])).is_err());
    assert!(noise_mse(&Tensor::<f64>::zeros(&[0]), &Tensor::zeros(&[0])).is_err());
}

#[test]
fn prediction_keeps_latent_shape_and_depends_on_inputs() {
    let model = common::small_model::<f64>(31);
    let inputs = common::window_inputs::<f64>(4, 32, 4);
    let bundle = model.build_bundle(&inputs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let z = Tensor::randn(&[4, 4, 4, 4], &mut rng);
    let ts = [10, 10, 10, 10];
    let base = model.predict_noise(&z, &ts, &bundle, true).unwrap();
    assert_eq!(base.shape(), z.shape());
    assert_eq!(model.predict_noise(&z, &ts, &bundle, true).unwrap(), base);

    let differs = |other: &Tensor<f64>| other.max_abs_diff(&base) > 1e-9;
    assert!(differs(&model.predict_noise(&z, &[900; 4], &bundle, true).unwrap()));
    assert!(differs(&model.predict_noise(&z.scale(0.5), &ts, &bundle, true).unwrap()));

    let mut no_pose = bundle.clone();
    no_pose.pose.values = no_pose.pose.values.map(|_| 0.0);
    assert!(differs(&model.predict_noise(&z, &ts, &no_pose, true).unwrap()));

    let mut no_fg = bundle.clone();
    for f in &mut no_fg.foreground.features {
        *f = f.map(|_| 0.0);
    }
    assert!(differs(&model.predict_noise(&z, &ts, &no_fg, true).unwrap()));

    let mut no_bg = bundle.clone();
    for l in &mut no_bg.background.levels {
        *l = l.map(|_| 0.0);
    }
    assert!(differs(&model.predict_noise(&z, &ts, &no_bg, true).unwrap()));

    let mut no_id = bundle.clone();
    no_id.identity.tokens = no_id.identity.tokens.map(|_| 0.0);
    assert!(differs(&model.predict_noise(&z, &ts, &no_id, true).unwrap()));
}
