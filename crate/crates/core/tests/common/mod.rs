#![allow(dead_code)]

pub mod attention;
pub mod gradcheck;
pub mod raycast;

use cfsynth::conditioning::WindowInputs;
use cfsynth::imaging::Mask;
use cfsynth::{Scalar, Tensor};

/// A centred box mask with a reference image that is zero outside it.
pub fn window_inputs<T: Scalar>(frames: usize, size: usize, latent_channels: usize) -> WindowInputs<T> {
    let q = size / 4;
    let mask = Mask::from_fn(size, size, |y, x| (q..size - q).contains(&y) && (q + q / 2..size - q - q / 2).contains(&x));
    let reference = Tensor::from_fn(&[size, size, 3], |i| {
        if mask.data()[i / 3] { T::c(0.3 + 0.002 * (i % 211) as f64) } else { T::zero() }
    });
    let l = size / 8;
    WindowInputs {
        pose_maps: Tensor::from_fn(&[frames, size, size, 3], |i| T::c((i % 7) as f64 / 7.0)),
        reference,
        reference_mask: mask,
        background: Tensor::from_fn(&[frames, l, l, latent_channels], |i| T::c((i as f64 * 0.37).sin())),
    }
}

use cfsynth::codec::CodecConfig;
use cfsynth::model::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A tiny model: 32×32 frames, 4×4×4 latents, 8 channels per level.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        codec: CodecConfig {
            scale_factor: 8,
            latent_channels: 4,
            widths: vec![4, 4, 8, 8],
        },
        channels: [8, 8, 8],
        heads: 2,
        time_dim: 16,
        pose_channels: 4,
        identity_tokens: 2,
        identity_dim: 8,
        ..ModelConfig::default()
    }
}

/// Adds Gaussian noise of scale `sd` to every parameter so zero-initialised
/// output layers stop hiding the inputs.
pub fn perturb<T: Scalar>(model: &mut Model<T>, sd: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for v in model.store.get_mut(id).data_mut() {
            let n: f64 = rng.sample(rand_distr::StandardNormal);
            *v += T::c(sd * n);
        }
    }
}

pub fn small_model<T: Scalar>(seed: u64) -> Model<T> {
    let mut m = Model::new(small_config(), seed).unwrap();
    perturb(&mut m, 0.05, seed ^ 0xabc);
    m
}

use cfsynth::codec::{train_codec, Codec, CodecTrainConfig};
use cfsynth::dataio::{generate_synthetic_clip, CameraPath, ClipRecord, SyntheticSceneSpec};

/// A 32×32 synthetic clip matching [`small_config`].
pub fn small_clip<T: Scalar>(identity: u64, motion: u64, camera: CameraPath, frames: usize) -> ClipRecord<T> {
    let spec = SyntheticSceneSpec {
        image_size: 32,
        ..SyntheticSceneSpec::new(identity, motion, camera, frames)
    };
    generate_synthetic_clip(&spec).unwrap()
}

/// [`small_model`] around an untrained but frozen codec, ready for
/// diffusion training.
pub fn trainable_model<T: Scalar>(seed: u64) -> Model<T> {
    let cfg = small_config();
    let frames = [Tensor::<T>::from_fn(&[32, 32, 3], |i| T::c((i % 29) as f64 / 29.0))];
    let zero = CodecTrainConfig { steps: 0, ..Default::default() };
    let (codec, _) = train_codec(Codec::new(cfg.codec.clone(), seed).unwrap(), &frames, &zero, None).unwrap();
    let mut m = Model::with_codec(cfg, codec, seed).unwrap();
    perturb(&mut m, 0.05, seed ^ 0xabc);
    m
}

use cfsynth::body_render::{BodyModelState, CameraPose, Intrinsics, UVTextureMap};
use cfsynth::imaging::quantize;

pub fn random_texture(seed: u64, size: (usize, usize)) -> UVTextureMap<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::from_fn(&[size.0, size.1, 3], |_| rng.random::<f64>());
    UVTextureMap::complete(quantize(&t)).unwrap()
}

pub fn random_state(rng: &mut ChaCha8Rng, joints: usize, amp: f64) -> BodyModelState<f64> {
    let theta = (0..joints)
        .map(|_| [0; 3].map(|_| rng.random_range(-amp..amp)))
        .collect();
    BodyModelState::new(theta, 0).unwrap()
}

pub fn random_camera(rng: &mut ChaCha8Rng, size: usize) -> CameraPose<f64> {
    let turns = rng.random::<f64>();
    let height = rng.random_range(-0.5..0.8);
    let radius = rng.random_range(3.5..4.5);
    CameraPose::orbit(
        [0.0, -0.05, 0.0],
        radius,
        height,
        turns,
        Intrinsics::centered(1.4 * size as f64, size, size),
    )
    .unwrap()
}
