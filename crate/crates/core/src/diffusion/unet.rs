//! Three-resolution denoising U-Net.
//!
//! ```text
//! [z_t ; z_pose] -> fusion conv
//! level 1 (h x w):     res, self-attn (+fg tokens 1), cross-attn, temporal -> down
//! level 2 (h/2 x w/2): res, self-attn (+fg tokens 2), cross-attn, temporal -> down
//! level 3 (h/4 x w/4): res, self-attn (+fg tokens 3), cross-attn (+bg 3), temporal
//! up to level 2:       upsample, conv, concat skip, res, cross-attn (+bg 2), temporal
//! up to level 1:       upsample, conv, concat skip, res, cross-attn (+bg 1), temporal
//! LN, SiLU, conv -> predicted noise
//! ```
//!
//! Cross-attention values always come from the identity tokens. Sites from
//! level 3 onwards form the decoding half and add the background-key term.

use rand::Rng;

use crate::autograd::Var;
use crate::conditioning::fused::CrossAttention;
use crate::diffusion::blocks::{ResBlock, TemporalAttention, TimeEmbedding};
use crate::error::{Error, Result};
use crate::nn::{Conv, Ctx, ParamGroup, ParamStore, SelfAttention};
use crate::scalar::Scalar;

/// Number of resolution levels; latent sides must be divisible by
/// `2^(LEVELS-1)`.
pub const LEVELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UNetDims {
    pub latent_channels: usize,
    pub pose_channels: usize,
    pub channels: [usize; LEVELS],
    pub heads: usize,
    pub time_dim: usize,
    pub identity_dim: usize,
}

#[derive(Debug, Clone)]
pub struct DownLevel {
    pub res: ResBlock,
    pub sa: SelfAttention,
    pub ca: CrossAttention,
    pub temporal: TemporalAttention,
    pub down: Option<Conv>,
}

#[derive(Debug, Clone)]
pub struct UpLevel {
    pub up: Conv,
    pub res: ResBlock,
    pub ca: CrossAttention,
    pub temporal: TemporalAttention,
}

/// Graph handles of every conditioning input for one window.
#[derive(Debug, Clone)]
pub struct CondVars<T> {
    /// `[F, h, w, c_pose]`
    pub pose: Var,
    /// Masked reference tokens per level, `[n_l, C_l]`, shared by all frames.
    pub fg: Vec<Var>,
    /// Background features per level, `[F * n_l, C_l]`.
    pub bg: Vec<Var>,
    /// Identity tokens `[K, E]`.
    pub ids: Var,
    pub lambda: T,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub dims: UNetDims,
    pub fusion: Conv,
    pub time: TimeEmbedding,
    pub down: Vec<DownLevel>,
    pub up: Vec<UpLevel>,
    pub out: Conv,
}

impl Denoiser {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, dims: UNetDims, rng: &mut R) -> Self {
        use ParamGroup::*;
        let c = dims.channels;
        let (h, td, e) = (dims.heads, dims.time_dim, dims.identity_dim);
        let fusion = Conv::new(
            store,
            "denoiser.fusion",
            DenoiserInputFusion,
            3,
            dims.latent_channels + dims.pose_channels,
            c[0],
            1,
            1.0,
            rng,
        );
        let time = TimeEmbedding::new(store, "denoiser.time", DenoiserConv, td, rng);
        let down = (0..LEVELS)
            .map(|l| {
                let p = format!("denoiser.down{}", l + 1);
                DownLevel {
                    res: ResBlock::new(store, &format!("{p}.res"), DenoiserConv, c[l], c[l], td, rng),
                    sa: SelfAttention::new(store, &format!("{p}.self_attn"), DenoiserSelfAttention, c[l], h, 0.5, rng),
                    ca: CrossAttention::new(store, &format!("{p}.cross_attn"), DenoiserCrossAttention, c[l], e, h, l + 1 == LEVELS, rng),
                    temporal: TemporalAttention::new(store, &format!("{p}.temporal"), DenoiserTemporal, c[l], h, rng),
                    down: (l + 1 < LEVELS)
                        .then(|| Conv::new(store, &format!("{p}.downsample"), DenoiserConv, 3, c[l], c[l + 1], 2, 1.0, rng)),
                }
            })
            .collect();
        let up = (0..LEVELS - 1)
            .rev()
            .map(|l| {
                let p = format!("denoiser.up{}", l + 1);
                UpLevel {
                    up: Conv::new(store, &format!("{p}.upsample"), DenoiserConv, 3, c[l + 1], c[l], 1, 1.0, rng),
                    res: ResBlock::new(store, &format!("{p}.res"), DenoiserConv, 2 * c[l], c[l], td, rng),
                    ca: CrossAttention::new(store, &format!("{p}.cross_attn"), DenoiserCrossAttention, c[l], e, h, true, rng),
                    temporal: TemporalAttention::new(store, &format!("{p}.temporal"), DenoiserTemporal, c[l], h, rng),
                }
            })
            .collect();
        let out = Conv::new(store, "denoiser.out", DenoiserConv, 3, c[0], dims.latent_channels, 1, 0.5, rng);
        Self {
            dims,
            fusion,
            time,
            down,
            up,
            out,
        }
    }

    /// Predicts the noise in `z_t` (`[F, h, w, c]`) with one timestep per
    /// frame. Temporal layers run only when `temporal` is set.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        z_t: Var,
        ts: &[usize],
        cond: &CondVars<T>,
        temporal: bool,
    ) -> Result<Var> {
        let s = ctx.shape(z_t).to_vec();
        let step = 1 << (LEVELS - 1);
        if s.len() != 4 || s[3] != self.dims.latent_channels || s[1] % step != 0 || s[2] % step != 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::shape("noisy latent", &[0, 0, 0, self.dims.latent_channels], &s));
        }
        let frames = s[0];
        if ts.len() != frames {
            return Err(Error::invalid("one timestep per frame required"));
        }
        if cond.fg.len() != LEVELS || cond.bg.len() != LEVELS {
            return Err(Error::invalid(format!(
                "conditioning needs {LEVELS} foreground and background levels, got {} and {}",
                cond.fg.len(),
                cond.bg.len()
            )));
        }
        let ps = ctx.shape(cond.pose).to_vec();
        if ps != [frames, s[1], s[2], self.dims.pose_channels] {
            return Err(Error::shape("pose latent", &[frames, s[1], s[2], self.dims.pose_channels], &ps));
        }
        for l in 0..LEVELS {
            let n = (s[1] >> l) * (s[2] >> l);
            let c = self.dims.channels[l];
            let fs = ctx.shape(cond.fg[l]).to_vec();
            if fs.len() != 2 || fs[1] != c {
                return Err(Error::shape("foreground tokens", &[0, c], &fs));
            }
            let bs = ctx.shape(cond.bg[l]).to_vec();
            if bs != [frames * n, c] {
                return Err(Error::shape("background features", &[frames * n, c], &bs));
            }
        }

        let x = ctx.concat_last(z_t, cond.pose)?;
        let mut x = self.fusion.forward(ctx, x)?;
        let temb = self.time.forward(ctx, ts)?;
        let mut skips = Vec::new();
        for (l, lv) in self.down.iter().enumerate() {
            let (h, w, c) = (s[1] >> l, s[2] >> l, self.dims.channels[l]);
            x = lv.res.forward(ctx, x, temb)?;
            let tok = ctx.reshape(x, &[frames * h * w, c])?;
            let tok = lv.sa.forward(ctx, tok, frames, Some(cond.fg[l]))?;
            let bg = lv.ca.uses_background.then_some(cond.bg[l]);
            let tok = lv.ca.forward(ctx, tok, frames, bg, cond.ids, cond.lambda)?;
            x = ctx.reshape(tok, &[frames, h, w, c])?;
            if temporal {
                x = lv.temporal.forward(ctx, x)?;
            }
            if let Some(d) = &lv.down {
                skips.push(x);
                x = d.forward(ctx, x)?;
            }
        }
        for (i, lv) in self.up.iter().enumerate() {
            let l = LEVELS - 2 - i;
            let (h, w, c) = (s[1] >> l, s[2] >> l, self.dims.channels[l]);
            let u = ctx.upsample2(x)?;
            let u = lv.up.forward(ctx, u)?;
            let skip = skips.pop().expect("one skip per level");
            let u = ctx.concat_last(u, skip)?;
            x = lv.res.forward(ctx, u, temb)?;
            let tok = ctx.reshape(x, &[frames * h * w, c])?;
            let tok = lv.ca.forward(ctx, tok, frames, Some(cond.bg[l]), cond.ids, cond.lambda)?;
            x = ctx.reshape(tok, &[frames, h, w, c])?;
            if temporal {
                x = lv.temporal.forward(ctx, x)?;
            }
        }
        let x = ctx.layer_norm(x);
        let x = ctx.silu(x);
        self.out.forward(ctx, x)
    }

    pub fn temporal_layers(&self) -> Vec<&TemporalAttention> {
        self.down
            .iter()
            .map(|l| &l.temporal)
            .chain(self.up.iter().map(|l| &l.temporal))
            .collect()
    }

    pub fn cross_attention_sites(&self) -> Vec<&CrossAttention> {
        self.down.iter().map(|l| &l.ca).chain(self.up.iter().map(|l| &l.ca)).collect()
    }
}
