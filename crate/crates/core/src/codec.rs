//! Deterministic convolutional autoencoder between images and latents.
//!
//! `scale_factor` must be a power of two; the encoder halves the resolution
//! `log2(scale_factor)` times. Latents are divided by their stored RMS so the
//! diffusion model sees roughly unit-scale inputs.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Conv, Ctx, FreezePlan, ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub scale_factor: usize,
    pub latent_channels: usize,
    /// Feature widths from full resolution down to latent resolution;
    /// length `log2(scale_factor) + 1`.
    pub widths: Vec<usize>,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            scale_factor: 8,
            latent_channels: 4,
            widths: vec![16, 32, 48, 64],
        }
    }
}

impl CodecConfig {
    pub fn stages(&self) -> usize {
        self.scale_factor.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !self.scale_factor.is_power_of_two() {
            return Err(Error::invalid("codec scale factor must be a power of two"));
        }
        if self.widths.len() != self.stages() + 1 || self.widths.contains(&0) {
            return Err(Error::invalid(format!(
                "codec needs {} positive widths for scale factor {}",
                self.stages() + 1,
                self.scale_factor
            )));
        }
        if self.latent_channels == 0 {
            return Err(Error::invalid("latent channel count must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Codec<T> {
    pub config: CodecConfig,
    pub store: ParamStore<T>,
    enc: Vec<Conv>,
    dec: Vec<Conv>,
    /// Raw latents are divided by this before use (their RMS over the
    /// training corpus).
    pub latent_std: f64,
    pub frozen: bool,
}

impl<T: Scalar> Codec<T> {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = &config.widths;
        let (ge, gd) = (ParamGroup::CodecEncoder, ParamGroup::CodecDecoder);
        let mut enc = vec![Conv::new(&mut store, "codec.enc.in", ge, 3, 3, w[0], 1, 1.0, &mut rng)];
        for i in 0..config.stages() {
            enc.push(Conv::new(&mut store, &format!("codec.enc.down{i}"), ge, 3, w[i], w[i + 1], 2, 1.0, &mut rng));
        }
        let last = *w.last().unwrap();
        enc.push(Conv::new(&mut store, "codec.enc.out", ge, 3, last, config.latent_channels, 1, 1.0, &mut rng));
        let mut dec = vec![Conv::new(&mut store, "codec.dec.in", gd, 3, config.latent_channels, last, 1, 1.0, &mut rng)];
        for i in (0..config.stages()).rev() {
            dec.push(Conv::new(&mut store, &format!("codec.dec.up{i}"), gd, 3, w[i + 1], w[i], 1, 1.0, &mut rng));
        }
        dec.push(Conv::new(&mut store, "codec.dec.out", gd, 3, w[0], 3, 1, 1.0, &mut rng));
        Ok(Self {
            config,
            store,
            enc,
            dec,
            latent_std: 1.0,
            frozen: false,
        })
    }

    pub fn latent_shape(&self, h: usize, w: usize) -> Result<[usize; 3]> {
        let s = self.config.scale_factor;
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::invalid(format!("image {h}x{w} is not divisible by scale factor {s}")));
        }
        Ok([h / s, w / s, self.config.latent_channels])
    }

    /// Graph encoder for `[B, H, W, 3]` images; output is normalized.
    pub fn encode_graph(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, c) in self.enc.iter().enumerate() {
            h = c.forward(ctx, h)?;
            if i + 1 < self.enc.len() {
                h = ctx.silu(h);
            }
        }
        Ok(ctx.scale(h, T::c(1.0 / self.latent_std)))
    }

    /// Graph decoder for normalized `[B, h, w, c]` latents; output is not
    /// clamped.
    pub fn decode_graph(&self, ctx: &mut Ctx<'_, T>, z: Var) -> Result<Var> {
        let mut h = ctx.scale(z, T::c(self.latent_std));
        let n = self.dec.len();
        for (i, c) in self.dec.iter().enumerate() {
            if i > 0 && i + 1 < n {
                h = ctx.upsample2(h)?;
            }
            h = c.forward(ctx, h)?;
            if i + 1 < n {
                h = ctx.silu(h);
            }
        }
        Ok(h)
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::invalid(format!("expected [B, H, W, 3] images, got {s:?}")));
        }
        self.latent_shape(s[1], s[2]).map(|_| ())
    }

    /// Encodes a batch `[B, H, W, 3]` to `[B, h, w, c]`.
    pub fn encode_batch(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(images)?;
        let mut ctx = Ctx::inference(&self.store);
        let x = ctx.constant(images.clone());
        let z = self.encode_graph(&mut ctx, x)?;
        Ok(ctx.value(z).clone())
    }

    /// Encodes one `[H, W, 3]` image.
    pub fn encode(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let s = image.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::invalid(format!("expected an [H, W, 3] image, got {s:?}")));
        }
        let z = self.encode_batch(&image.clone().reshape(&[1, s[0], s[1], s[2]])?)?;
        let zs = z.shape()[1..].to_vec();
        z.reshape(&zs)
    }

    /// Decodes `[B, h, w, c]` latents to images clamped to `[0, 1]`.
    pub fn decode_batch(&self, latents: &Tensor<T>) -> Result<Tensor<T>> {
        let s = latents.shape();
        if s.len() != 4 || s[3] != self.config.latent_channels {
            return Err(Error::shape("latent", &[0, 0, 0, self.config.latent_channels], s));
        }
        if !latents.all_finite() {
            return Err(Error::invalid("latent contains non-finite values"));
        }
        let mut ctx = Ctx::inference(&self.store);
        let z = ctx.constant(latents.clone());
        let x = self.decode_graph(&mut ctx, z)?;
        Ok(ctx.value(x).map(|v| v.max(T::zero()).min(T::one())))
    }

    pub fn decode(&self, latent: &Tensor<T>) -> Result<Tensor<T>> {
        let s = latent.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::shape("latent", &[0, 0, self.config.latent_channels], &s));
        }
        let x = self.decode_batch(&latent.clone().reshape(&[1, s[0], s[1], s[2]])?)?;
        let xs = x.shape()[1..].to_vec();
        x.reshape(&xs)
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    pub fn cast<U: Scalar>(&self) -> Codec<U> {
        Codec {
            config: self.config.clone(),
            store: self.store.cast(),
            enc: self.enc.clone(),
            dec: self.dec.clone(),
            latent_std: self.latent_std,
            frozen: self.frozen,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 2e-3,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecLogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Trains the autoencoder on `[H, W, 3]` images with a pixel MSE loss,
/// recalibrates the latent scale, and returns the codec frozen. Losses are
/// appended to `log_path` as JSON lines when given.
pub fn train_codec<T: Scalar>(
    mut codec: Codec<T>,
    corpus: &[Tensor<T>],
    config: &CodecTrainConfig,
    log_path: Option<&Path>,
) -> Result<(Codec<T>, Vec<CodecLogRecord>)> {
    if corpus.is_empty() {
        return Err(Error::invalid("codec training corpus is empty"));
    }
    if codec.frozen && config.steps > 0 {
        return Err(Error::invalid("codec is frozen"));
    }
    let shape = corpus[0].shape().to_vec();
    if corpus.iter().any(|x| x.shape() != shape.as_slice()) {
        return Err(Error::invalid("codec corpus images differ in size"));
    }
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::invalid("codec training needs a positive batch size and learning rate"));
    }
    codec.check_images(&Tensor::zeros(&[1, shape[0], shape[1], shape[2]]))?;
    let mut log_file = match log_path {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let plan = FreezePlan::new([ParamGroup::CodecEncoder, ParamGroup::CodecDecoder]);
    let mut opt = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(config.steps);
    // Training runs on raw latents; the scale is recalibrated at the end.
    codec.latent_std = 1.0;
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(corpus[order[cursor]].clone());
            cursor += 1;
        }
        let x = Tensor::stack(&batch)?;
        let lr = cosine_lr(config.lr, step, config.steps);
        let (loss, grads) = {
            let mut ctx = Ctx::training(&codec.store, &plan);
            let xv = ctx.constant(x);
            let z = codec.encode_graph(&mut ctx, xv)?;
            let y = codec.decode_graph(&mut ctx, z)?;
            let loss = ctx.mse(y, xv)?;
            (ctx.value(loss).data()[0].f64(), ctx.param_grads(loss)?)
        };
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("codec loss diverged at step {step}")));
        }
        opt.step(&mut codec.store, &plan, &grads, lr);
        let rec = CodecLogRecord { step, loss, lr };
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(&rec).expect("log record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(log_path.unwrap(), e))?;
        }
        log.push(rec);
    }
    codec.latent_std = latent_std(&codec, corpus)?;
    codec.frozen = true;
    Ok((codec, log))
}

/// Half-cosine decay from `base` to `base / 10`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let p = step as f64 / (total - 1) as f64;
    base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Root-mean-square of raw latents over the corpus.
fn latent_std<T: Scalar>(codec: &Codec<T>, corpus: &[Tensor<T>]) -> Result<f64> {
    let mut raw = codec.clone();
    raw.latent_std = 1.0;
    let (mut s2, mut n) = (0.0, 0usize);
    for chunk in corpus.chunks(16) {
        let z = raw.encode_batch(&Tensor::stack(chunk)?)?;
        s2 += z.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>();
        n += z.len();
    }
    let rms = (s2 / n as f64).sqrt();
    Ok(if rms > 1e-6 { rms } else { 1.0 })
}
