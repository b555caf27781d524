//! Trainable encoders for the four control pathways.

use rand::Rng;

use crate::autograd::Var;
use crate::diffusion::blocks::{ResBlock, TimeEmbedding};
use crate::diffusion::unet::{UNetDims, LEVELS};
use crate::error::{Error, Result};
use crate::nn::{Conv, Ctx, Linear, ParamGroup, ParamId, ParamInit, ParamStore, SelfAttention};
use crate::scalar::Scalar;

/// Pose maps `[F, H, W, 3]` to pose latents `[F, H/s, W/s, c_p]`:
/// `log2(s)` stride-2 convolutions, one stride-1 convolution, then one
/// spatial self-attention layer.
#[derive(Debug, Clone)]
pub struct PoseExtractor {
    pub convs: Vec<Conv>,
    pub attn: SelfAttention,
    pub scale_factor: usize,
    pub channels: usize,
}

impl PoseExtractor {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        scale_factor: usize,
        channels: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::PoseExtractor;
        let stages = scale_factor.trailing_zeros() as usize;
        let mut convs = Vec::new();
        let mut c_in = 3;
        for i in 0..stages {
            let c_out = (16 << i).min(32);
            convs.push(Conv::new(store, &format!("pose.conv{i}"), g, 3, c_in, c_out, 2, 1.0, rng));
            c_in = c_out;
        }
        convs.push(Conv::new(store, &format!("pose.conv{stages}"), g, 3, c_in, channels, 1, 1.0, rng));
        let attn = SelfAttention::new(store, "pose.self_attn", g, channels, heads, 0.5, rng);
        Self {
            convs,
            attn,
            scale_factor,
            channels,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, maps: Var) -> Result<Var> {
        let s = ctx.shape(maps).to_vec();
        let k = self.scale_factor;
        if s.len() != 4 || s[3] != 3 || s[1] % k != 0 || s[2] % k != 0 {
            return Err(Error::invalid(format!("pose maps {s:?} are not [F, H, W, 3] divisible by {k}")));
        }
        let mut h = maps;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(ctx, h)?;
            if i + 1 < self.convs.len() {
                h = ctx.silu(h);
            }
        }
        let (f, lh, lw) = (s[0], s[1] / k, s[2] / k);
        let tok = ctx.reshape(h, &[f * lh * lw, self.channels])?;
        let tok = self.attn.forward(ctx, tok, f, None)?;
        ctx.reshape(tok, &[f, lh, lw, self.channels])
    }
}

/// Copy of the denoiser's down path that reads the clean reference latent
/// at `t = 0` with empty pose channels. The output of each spatial
/// self-attention layer is captured as that level's foreground tokens.
#[derive(Debug, Clone)]
pub struct ReferenceNet {
    pub dims: UNetDims,
    pub fusion: Conv,
    pub time: TimeEmbedding,
    pub res: Vec<ResBlock>,
    pub attn: Vec<SelfAttention>,
    pub down: Vec<Conv>,
}

impl ReferenceNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, dims: UNetDims, rng: &mut R) -> Self {
        let (gf, gs) = (ParamGroup::FgEncoderFrozen, ParamGroup::FgEncoderSpatialAttention);
        let c = dims.channels;
        let fusion = Conv::new(
            store,
            "reference.fusion",
            gf,
            3,
            dims.latent_channels + dims.pose_channels,
            c[0],
            1,
            1.0,
            rng,
        );
        let time = TimeEmbedding::new(store, "reference.time", gf, dims.time_dim, rng);
        let mut res = Vec::new();
        let mut attn = Vec::new();
        let mut down = Vec::new();
        for l in 0..LEVELS {
            let p = format!("reference.down{}", l + 1);
            res.push(ResBlock::new(store, &format!("{p}.res"), gf, c[l], c[l], dims.time_dim, rng));
            attn.push(SelfAttention::new(store, &format!("{p}.self_attn"), gs, c[l], dims.heads, 0.5, rng));
            if l + 1 < LEVELS {
                down.push(Conv::new(store, &format!("{p}.downsample"), gf, 3, c[l], c[l + 1], 2, 1.0, rng));
            }
        }
        Self {
            dims,
            fusion,
            time,
            res,
            attn,
            down,
        }
    }

    /// `latent` is `[1, h, w, c]`. Returns unmasked tokens `[n_l, C_l]` per
    /// level.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, latent: Var) -> Result<Vec<Var>> {
        let s = ctx.shape(latent).to_vec();
        if s.len() != 4 || s[0] != 1 || s[3] != self.dims.latent_channels {
            return Err(Error::shape("reference latent", &[1, 0, 0, self.dims.latent_channels], &s));
        }
        let empty_pose = ctx.constant(crate::Tensor::zeros(&[1, s[1], s[2], self.dims.pose_channels]));
        let x = ctx.concat_last(latent, empty_pose)?;
        let mut x = self.fusion.forward(ctx, x)?;
        let temb = self.time.forward(ctx, &[0])?;
        let mut out = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let (h, w, c) = (s[1] >> l, s[2] >> l, self.dims.channels[l]);
            x = self.res[l].forward(ctx, x, temb)?;
            let tok = ctx.reshape(x, &[h * w, c])?;
            let tok = self.attn[l].forward(ctx, tok, 1, None)?;
            out.push(tok);
            if l + 1 < LEVELS {
                x = ctx.reshape(tok, &[1, h, w, c])?;
                x = self.down[l].forward(ctx, x)?;
            }
        }
        Ok(out)
    }
}

/// Background latents `[F, h, w, c]` to a feature pyramid matching the
/// denoiser's decoding sites: `[F*n_l, C_l]` for each level.
#[derive(Debug, Clone)]
pub struct BackgroundEncoder {
    pub stem: Conv,
    pub mix: Conv,
    pub down: Vec<Conv>,
    pub channels: [usize; LEVELS],
}

impl BackgroundEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, dims: UNetDims, rng: &mut R) -> Self {
        let g = ParamGroup::BackgroundEncoder;
        let c = dims.channels;
        Self {
            stem: Conv::new(store, "background.stem", g, 3, dims.latent_channels, c[0], 1, 1.0, rng),
            mix: Conv::new(store, "background.mix", g, 3, c[0], c[0], 1, 1.0, rng),
            down: (0..LEVELS - 1)
                .map(|l| Conv::new(store, &format!("background.down{}", l + 1), g, 3, c[l], c[l + 1], 2, 1.0, rng))
                .collect(),
            channels: c,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, latents: Var) -> Result<Vec<Var>> {
        let s = ctx.shape(latents).to_vec();
        if s.len() != 4 || s[0] == 0 {
            return Err(Error::invalid("background encoder needs [F, h, w, c] latents with F >= 1"));
        }
        let h = self.stem.forward(ctx, latents)?;
        let h = ctx.silu(h);
        let mut h = self.mix.forward(ctx, h)?;
        let mut levels = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let shape = ctx.shape(h).to_vec();
            levels.push(ctx.reshape(h, &[shape[0] * shape[1] * shape[2], self.channels[l]])?);
            if l + 1 < LEVELS {
                let a = ctx.silu(h);
                h = self.down[l].forward(ctx, a)?;
            }
        }
        Ok(levels)
    }
}

/// Image-to-token encoder producing the identity embedding.
pub trait IdentityEncoder {
    fn tokens(&self) -> usize;
    fn dim(&self) -> usize;
    /// `image` is `[1, H, W, 3]`; returns `[K, E]`.
    fn encode<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Var>;
}

/// Three stride-2 convolutions, then `K` learned queries attend over the
/// resulting feature tokens, followed by a linear map to width `E`.
#[derive(Debug, Clone)]
pub struct IdentityEmbedder {
    pub convs: Vec<Conv>,
    pub queries: ParamId,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub width: usize,
    pub heads: usize,
    pub tokens: usize,
    pub dim: usize,
}

impl IdentityEmbedder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        tokens: usize,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::IdentityEmbedder;
        let widths = [3, 16, 32, 64];
        let convs = (0..3)
            .map(|i| Conv::new(store, &format!("identity.conv{i}"), g, 3, widths[i], widths[i + 1], 2, 1.0, rng))
            .collect();
        let width = widths[3];
        let queries = store.init("identity.queries", g, &[tokens, width], ParamInit::FanIn { fan_in: 1, gain: 1.0 }, rng);
        Self {
            convs,
            queries,
            q: Linear::new(store, "identity.to_q", g, width, width, false, 1.0, rng),
            k: Linear::new(store, "identity.to_k", g, width, width, false, 1.0, rng),
            v: Linear::new(store, "identity.to_v", g, width, width, false, 1.0, rng),
            out: Linear::new(store, "identity.out", g, width, dim, true, 1.0, rng),
            width,
            heads,
            tokens,
            dim,
        }
    }
}

impl IdentityEncoder for IdentityEmbedder {
    fn tokens(&self) -> usize {
        self.tokens
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Var> {
        let s = ctx.shape(image).to_vec();
        if s.len() != 4 || s[0] != 1 || s[3] != 3 || s[1] % 8 != 0 || s[2] % 8 != 0 {
            return Err(Error::invalid(format!("identity input {s:?} is not [1, H, W, 3] divisible by 8")));
        }
        let mut h = image;
        for c in &self.convs {
            h = c.forward(ctx, h)?;
            h = ctx.silu(h);
        }
        let n = (s[1] / 8) * (s[2] / 8);
        let tok = ctx.reshape(h, &[n, self.width])?;
        let tok = ctx.layer_norm(tok);
        let qs = ctx.p(self.queries);
        let q = self.q.forward(ctx, qs)?;
        let k = self.k.forward(ctx, tok)?;
        let v = self.v.forward(ctx, tok)?;
        let d = self.width / self.heads;
        let a = ctx.attention(q, k, v, 1, self.heads, T::one() / T::from_usize_lossy(d).sqrt())?;
        self.out.forward(ctx, a)
    }
}
