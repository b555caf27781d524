//! Control signals for the denoiser: pose latents, masked foreground
//! features, background features and the identity embedding.
//!
//! Every encoder exists in graph form (for training) and in plain tensor
//! form (for inspection and sampling).

pub mod encoders;
pub mod fused;

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::Serialize;

use crate::autograd::Var;
use crate::diffusion::unet::{CondVars, LEVELS};
use crate::error::{Error, Result};
use crate::imaging::Mask;
use crate::model::Model;
use crate::nn::Ctx;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use encoders::{BackgroundEncoder, IdentityEmbedder, IdentityEncoder, PoseExtractor, ReferenceNet};
pub use fused::{fused_cross_attention, value_row, AttentionProjections, CrossAttention};

/// Pose latents `[F, h, w, c_pose]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseLatent<T> {
    pub values: Tensor<T>,
}

/// Reference-frame features `[h_l, w_l, C_l]` with their masks, one per
/// level.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundFeatureSet<T> {
    pub features: Vec<Tensor<T>>,
    pub masks: Vec<Mask>,
    pub masked: bool,
}

/// Background features `[F, h_l, w_l, C_l]` per level.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundLatentSeq<T> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Scalar> BackgroundLatentSeq<T> {
    pub fn frames(&self) -> usize {
        self.levels.first().map_or(0, |t| t.dim(0))
    }
}

/// Identity tokens `[K, E]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEmbedding<T> {
    pub tokens: Tensor<T>,
}

/// Everything the denoiser is conditioned on for a frame sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle<T> {
    pub pose: PoseLatent<T>,
    pub foreground: ForegroundFeatureSet<T>,
    pub background: BackgroundLatentSeq<T>,
    pub identity: IdentityEmbedding<T>,
    pub lambda: T,
}

impl<T: Scalar> ConditioningBundle<T> {
    pub fn frames(&self) -> usize {
        self.pose.values.dim(0)
    }

    /// The bundle restricted to frames `range`. Frame-independent parts are
    /// shared unchanged.
    pub fn window(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.frames() {
            return Err(Error::invalid(format!("window {range:?} outside {} frames", self.frames())));
        }
        Ok(Self {
            pose: PoseLatent {
                values: slice_frames(&self.pose.values, range.clone())?,
            },
            foreground: self.foreground.clone(),
            background: BackgroundLatentSeq {
                levels: self
                    .background
                    .levels
                    .iter()
                    .map(|t| slice_frames(t, range.clone()))
                    .collect::<Result<_>>()?,
            },
            identity: self.identity.clone(),
            lambda: self.lambda,
        })
    }
}

fn slice_frames<T: Scalar>(t: &Tensor<T>, range: Range<usize>) -> Result<Tensor<T>> {
    let items: Vec<_> = range.map(|i| t.index_axis0(i)).collect();
    Tensor::stack(&items)
}

/// Raw inputs for conditioning one window of frames.
#[derive(Debug, Clone)]
pub struct WindowInputs<T> {
    /// `[F, H, W, 3]`
    pub pose_maps: Tensor<T>,
    /// Reference frame `[H, W, 3]`, zero outside `reference_mask`.
    pub reference: Tensor<T>,
    pub reference_mask: Mask,
    /// Normalized background latents `[F, h, w, c]`.
    pub background: Tensor<T>,
}

fn check_reference<T: Scalar>(image: &Tensor<T>, mask: &Mask) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::invalid(format!("reference image must be [H, W, 3], got {s:?}")));
    }
    if (mask.height(), mask.width()) != (s[0], s[1]) {
        return Err(Error::shape("reference mask", &s[..2], &[mask.height(), mask.width()]));
    }
    for (p, px) in image.data().chunks_exact(3).enumerate() {
        if !mask.data()[p] && px.iter().any(|v| *v != T::zero()) {
            return Err(Error::invalid(format!(
                "reference background is not zeroed at pixel ({}, {})",
                p / s[1],
                p % s[1]
            )));
        }
    }
    Ok(())
}

/// Level masks matching the reference net's token grids.
fn level_masks(mask: &Mask, latent_h: usize, latent_w: usize) -> Vec<Mask> {
    (0..LEVELS).map(|l| mask.downsample_nearest(latent_h >> l, latent_w >> l)).collect()
}

fn mask_tokens<T: Scalar>(ctx: &mut Ctx<'_, T>, tokens: Var, mask: &Mask) -> Result<Var> {
    let c = ctx.shape(tokens)[1];
    let m: Tensor<T> = mask.to_tensor();
    let rows = m.data().iter().flat_map(|&v| std::iter::repeat_n(v, c)).collect();
    let mt = ctx.constant(Tensor::new(&[mask.height() * mask.width(), c], rows)?);
    ctx.mul(tokens, mt)
}

impl<T: Scalar> Model<T> {
    /// Graph-form conditioning for one window. With `masking` off the
    /// reference features are passed through unmasked.
    pub fn condition_graph(&self, ctx: &mut Ctx<'_, T>, inputs: &WindowInputs<T>, masking: bool) -> Result<CondVars<T>> {
        check_reference(&inputs.reference, &inputs.reference_mask)?;
        let ps = inputs.pose_maps.shape();
        let rs = inputs.reference.shape();
        if ps.len() != 4 || ps[1..] != rs[..] {
            return Err(Error::shape("pose maps", &[0, rs[0], rs[1], 3], ps));
        }
        let [lh, lw, lc] = self.codec.latent_shape(rs[0], rs[1])?;
        let bs = inputs.background.shape();
        if bs != [ps[0], lh, lw, lc] {
            return Err(Error::shape("background latents", &[ps[0], lh, lw, lc], bs));
        }
        let pose_in = ctx.constant(inputs.pose_maps.clone());
        let pose = self.pose.forward(ctx, pose_in)?;

        let r4 = inputs.reference.clone().reshape(&[1, rs[0], rs[1], 3])?;
        let ref_latent = self.codec.encode_batch(&r4)?;
        let ref_latent = ctx.constant(ref_latent);
        let tokens = self.reference.forward(ctx, ref_latent)?;
        let fg = if masking {
            let masks = level_masks(&inputs.reference_mask, lh, lw);
            tokens
                .into_iter()
                .zip(&masks)
                .map(|(t, m)| mask_tokens(ctx, t, m))
                .collect::<Result<Vec<_>>>()?
        } else {
            tokens
        };

        let bg_in = ctx.constant(inputs.background.clone());
        let bg = self.background.forward(ctx, bg_in)?;
        let id_in = ctx.constant(r4);
        let ids = self.identity.encode(ctx, id_in)?;
        Ok(CondVars {
            pose,
            fg,
            bg,
            ids,
            lambda: self.lambda(),
        })
    }

    /// Binds a precomputed bundle into a graph as constants.
    pub fn bundle_vars(&self, ctx: &mut Ctx<'_, T>, bundle: &ConditioningBundle<T>) -> Result<CondVars<T>> {
        let f = bundle.frames();
        let fg = bundle
            .foreground
            .features
            .iter()
            .map(|t| {
                let s = t.shape();
                Ok(ctx.constant(t.clone().reshape(&[s[0] * s[1], s[2]])?))
            })
            .collect::<Result<Vec<_>>>()?;
        let bg = bundle
            .background
            .levels
            .iter()
            .map(|t| {
                let s = t.shape();
                if s[0] != f {
                    return Err(Error::shape("background frames", &[f], &s[..1]));
                }
                Ok(ctx.constant(t.clone().reshape(&[s[0] * s[1] * s[2], s[3]])?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CondVars {
            pose: ctx.constant(bundle.pose.values.clone()),
            fg,
            bg,
            ids: ctx.constant(bundle.identity.tokens.clone()),
            lambda: bundle.lambda,
        })
    }

    /// Predicted noise for `z_t` (`[F, h, w, c]`) under `bundle`.
    pub fn predict_noise(&self, z_t: &Tensor<T>, ts: &[usize], bundle: &ConditioningBundle<T>, temporal: bool) -> Result<Tensor<T>> {
        let mut ctx = Ctx::inference(&self.store);
        let cond = self.bundle_vars(&mut ctx, bundle)?;
        let z = ctx.constant(z_t.clone());
        let out = self.denoiser.forward(&mut ctx, z, ts, &cond, temporal)?;
        Ok(ctx.value(out).clone())
    }

    /// Pose latents for pose maps `[F, H, W, 3]`.
    pub fn extract_pose(&self, pose_maps: &Tensor<T>) -> Result<PoseLatent<T>> {
        let mut ctx = Ctx::inference(&self.store);
        let x = ctx.constant(pose_maps.clone());
        let out = self.pose.forward(&mut ctx, x)?;
        Ok(PoseLatent {
            values: ctx.value(out).clone(),
        })
    }

    /// Unmasked reference features. The reference image must be zero
    /// outside its mask.
    pub fn encode_foreground(&self, reference: &Tensor<T>, mask: &Mask) -> Result<ForegroundFeatureSet<T>> {
        check_reference(reference, mask)?;
        let s = reference.shape();
        let [lh, lw, _] = self.codec.latent_shape(s[0], s[1])?;
        let mut ctx = Ctx::inference(&self.store);
        let lat = self.codec.encode_batch(&reference.clone().reshape(&[1, s[0], s[1], 3])?)?;
        let lat = ctx.constant(lat);
        let toks = self.reference.forward(&mut ctx, lat)?;
        let features = toks
            .iter()
            .enumerate()
            .map(|(l, &v)| {
                let c = self.config.channels[l];
                ctx.value(v).clone().reshape(&[lh >> l, lw >> l, c])
            })
            .collect::<Result<_>>()?;
        Ok(ForegroundFeatureSet {
            features,
            masks: level_masks(mask, lh, lw),
            masked: false,
        })
    }

    /// Background plates `[F, H, W, 3]` through the frozen codec and the
    /// background encoder.
    pub fn encode_background(&self, frames: &Tensor<T>) -> Result<BackgroundLatentSeq<T>> {
        if frames.ndim() != 4 || frames.dim(0) == 0 {
            return Err(Error::invalid("background needs at least one [H, W, 3] frame"));
        }
        self.encode_background_latents(&self.codec.encode_batch(frames)?)
    }

    /// Background features for normalized latents `[F, h, w, c]`.
    pub fn encode_background_latents(&self, latents: &Tensor<T>) -> Result<BackgroundLatentSeq<T>> {
        let s = latents.shape().to_vec();
        if s.len() != 4 || s[3] != self.config.codec.latent_channels {
            return Err(Error::shape("background latents", &[0, 0, 0, self.config.codec.latent_channels], &s));
        }
        let mut ctx = Ctx::inference(&self.store);
        let x = ctx.constant(latents.clone());
        let levels = self.background.forward(&mut ctx, x)?;
        let levels = levels
            .iter()
            .enumerate()
            .map(|(l, &v)| ctx.value(v).clone().reshape(&[s[0], s[1] >> l, s[2] >> l, self.config.channels[l]]))
            .collect::<Result<_>>()?;
        Ok(BackgroundLatentSeq { levels })
    }

    /// Identity tokens for a reference image `[H, W, 3]`.
    pub fn embed_identity(&self, reference: &Tensor<T>) -> Result<IdentityEmbedding<T>> {
        let s = reference.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::invalid(format!("reference image must be [H, W, 3], got {s:?}")));
        }
        let mut ctx = Ctx::inference(&self.store);
        let x = ctx.constant(reference.clone().reshape(&[1, s[0], s[1], 3])?);
        let out = self.identity.encode(&mut ctx, x)?;
        Ok(IdentityEmbedding {
            tokens: ctx.value(out).clone(),
        })
    }

    /// Full conditioning for a sequence, computed once.
    pub fn build_bundle(&self, inputs: &WindowInputs<T>) -> Result<ConditioningBundle<T>> {
        let pose = self.extract_pose(&inputs.pose_maps)?;
        let foreground = apply_mask(&self.encode_foreground(&inputs.reference, &inputs.reference_mask)?)?;
        let background = self.encode_background_latents(&inputs.background)?;
        if background.frames() != pose.values.dim(0) {
            return Err(Error::shape("background frames", &[pose.values.dim(0)], &[background.frames()]));
        }
        let identity = self.embed_identity(&inputs.reference)?;
        Ok(ConditioningBundle {
            pose,
            foreground,
            background,
            identity,
            lambda: self.lambda(),
        })
    }
}

/// Zeroes every feature outside its level mask.
pub fn apply_mask<T: Scalar>(set: &ForegroundFeatureSet<T>) -> Result<ForegroundFeatureSet<T>> {
    if set.masks.len() != set.features.len() {
        return Err(Error::invalid(format!(
            "{} feature levels but {} masks",
            set.features.len(),
            set.masks.len()
        )));
    }
    let features = set
        .features
        .iter()
        .zip(&set.masks)
        .map(|(f, m)| {
            let s = f.shape();
            if s.len() != 3 || (s[0], s[1]) != (m.height(), m.width()) {
                return Err(Error::shape("mask for features", &s[..s.len().min(2)], &[m.height(), m.width()]));
            }
            let c = s[2];
            let mut out = f.clone();
            for (p, px) in out.data_mut().chunks_exact_mut(c).enumerate() {
                if !m.data()[p] {
                    px.fill(T::zero());
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(ForegroundFeatureSet {
        features,
        masks: set.masks.clone(),
        masked: true,
    })
}

/// Per-level statistics of reference features, for the debug dump.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureStats {
    pub level: usize,
    pub min: f64,
    pub max: f64,
    pub energy_inside: f64,
    pub energy_outside: f64,
}

pub fn feature_stats<T: Scalar>(set: &ForegroundFeatureSet<T>) -> Result<Vec<FeatureStats>> {
    if set.masks.len() != set.features.len() {
        return Err(Error::invalid("feature levels and masks differ in count"));
    }
    Ok(set
        .features
        .iter()
        .zip(&set.masks)
        .enumerate()
        .map(|(level, (f, m))| {
            let c = f.shape()[2];
            let mut st = FeatureStats {
                level: level + 1,
                min: f64::INFINITY,
                max: f64::NEG_INFINITY,
                energy_inside: 0.0,
                energy_outside: 0.0,
            };
            for (p, px) in f.data().chunks_exact(c).enumerate() {
                for v in px.iter().map(|v| v.f64()) {
                    st.min = st.min.min(v);
                    st.max = st.max.max(v);
                    if m.data()[p] {
                        st.energy_inside += v * v;
                    } else {
                        st.energy_outside += v * v;
                    }
                }
            }
            st
        })
        .collect())
}

/// Appends one JSON line per level.
pub fn write_feature_dump(path: &Path, stats: &[FeatureStats]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for s in stats {
        let line = serde_json::to_string(s).map_err(|e| Error::format("feature dump", e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
