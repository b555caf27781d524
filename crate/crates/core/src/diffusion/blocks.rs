//! Building blocks of the denoising U-Net.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv, Ctx, Linear, ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sinusoidal embedding of one timestep per row: `[sin(t w_i), cos(t w_i)]`
/// with `w_i = 10000^(-i / (dim/2))`.
pub fn sinusoidal<T: Scalar>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[ts.len(), dim], |i| {
        let (row, col) = (i / dim, i % dim);
        let k = col % half.max(1);
        let w = (-(10000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        let a = ts[row] as f64 * w;
        T::c(if col < half { a.sin() } else { a.cos() })
    })
}

/// Timestep MLP: sinusoidal features, Linear, SiLU, Linear.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    pub l1: Linear,
    pub l2: Linear,
    pub dim: usize,
}

impl TimeEmbedding {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, dim: usize, rng: &mut R) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), group, dim, dim, true, 1.0, rng),
            l2: Linear::new(store, &format!("{name}.l2"), group, dim, dim, true, 1.0, rng),
            dim,
        }
    }

    /// `[frames, dim]` embedding for per-frame timesteps.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, ts: &[usize]) -> Result<Var> {
        let s = ctx.constant(sinusoidal(ts, self.dim));
        let h = self.l1.forward(ctx, s)?;
        let h = ctx.silu(h);
        self.l2.forward(ctx, h)
    }
}

/// Pre-norm residual block with a per-frame timestep bias.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub time: Linear,
    pub skip: Option<Conv>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        time_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv1: Conv::new(store, &format!("{name}.conv1"), group, 3, c_in, c_out, 1, 1.0, rng),
            time: Linear::new(store, &format!("{name}.time"), group, time_dim, c_out, true, 1.0, rng),
            conv2: Conv::new(store, &format!("{name}.conv2"), group, 3, c_out, c_out, 1, 0.5, rng),
            skip: (c_in != c_out).then(|| Conv::new(store, &format!("{name}.skip"), group, 1, c_in, c_out, 1, 1.0, rng)),
        }
    }

    /// `x` is `[F, H, W, C_in]`, `temb` is `[F, time_dim]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, temb: Var) -> Result<Var> {
        let h = ctx.layer_norm(x);
        let h = ctx.silu(h);
        let h = self.conv1.forward(ctx, h)?;
        let te = ctx.silu(temb);
        let te = self.time.forward(ctx, te)?;
        let h = ctx.add_frame_bias(h, te)?;
        let h = ctx.layer_norm(h);
        let h = ctx.silu(h);
        let h = self.conv2.forward(ctx, h)?;
        let s = match &self.skip {
            Some(c) => c.forward(ctx, x)?,
            None => x,
        };
        ctx.add(s, h)
    }
}

/// Sinusoidal frame-position code added to temporal-attention inputs.
fn frame_positions<T: Scalar>(frames: usize, positions: usize, dim: usize) -> Tensor<T> {
    let pe: Tensor<T> = sinusoidal(&(0..frames).collect::<Vec<_>>(), dim);
    Tensor::from_fn(&[positions * frames, dim], |i| {
        let (row, col) = (i / dim, i % dim);
        pe.data()[(row % frames) * dim + col]
    })
}

/// Self-attention along the frame axis, independently at every spatial
/// position, added residually. The output projection starts at zero so a
/// fresh layer is the identity.
#[derive(Debug, Clone)]
pub struct TemporalAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl TemporalAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.to_q"), group, dim, dim, false, 1.0, rng),
            k: Linear::new(store, &format!("{name}.to_k"), group, dim, dim, false, 1.0, rng),
            v: Linear::new(store, &format!("{name}.to_v"), group, dim, dim, false, 1.0, rng),
            o: Linear::new(store, &format!("{name}.to_out"), group, dim, dim, true, 0.0, rng),
            heads,
            dim,
        }
    }

    /// `x` is `[F, H, W, C]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != self.dim {
            return Err(Error::shape("temporal attention input", &[0, 0, 0, self.dim], &shape));
        }
        let frames = shape[0];
        if frames == 0 {
            return Err(Error::invalid("temporal attention needs at least one frame"));
        }
        let n = shape[1] * shape[2];
        let flat = ctx.reshape(x, &[frames * n, self.dim])?;
        // Rows grouped by spatial position: row p*F + f holds frame f.
        let to_pos: Vec<usize> = (0..n).flat_map(|p| (0..frames).map(move |f| f * n + p)).collect();
        let xt = ctx.gather_rows(flat, to_pos)?;
        let xn = ctx.layer_norm(xt);
        let pe = ctx.constant(frame_positions(frames, n, self.dim));
        let xp = ctx.add(xn, pe)?;
        let q = self.q.forward(ctx, xp)?;
        let k = self.k.forward(ctx, xp)?;
        let v = self.v.forward(ctx, xn)?;
        let d = self.dim / self.heads;
        let a = ctx.attention(q, k, v, n, self.heads, T::one() / T::from_usize_lossy(d).sqrt())?;
        let o = self.o.forward(ctx, a)?;
        let to_frame: Vec<usize> = (0..frames).flat_map(|f| (0..n).map(move |p| p * frames + f)).collect();
        let back = ctx.gather_rows(o, to_frame)?;
        let y = ctx.add(flat, back)?;
        ctx.reshape(y, &shape)
    }
}

/// Applies a temporal layer to plain frame latents `[F, H, W, C]`.
pub fn temporal_attend<T: Scalar>(frames: &Tensor<T>, layer: &TemporalAttention, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let mut ctx = Ctx::inference(store);
    let x = ctx.constant(frames.clone());
    let y = layer.forward(&mut ctx, x)?;
    Ok(ctx.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_temporal_layer_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let layer = TemporalAttention::new(&mut store, "t", ParamGroup::DenoiserTemporal, 8, 2, &mut rng);
        for f in [1, 2, 8, 24] {
            let x = Tensor::randn(&[f, 2, 3, 8], &mut rng);
            assert_eq!(temporal_attend(&x, &layer, &store).unwrap(), x);
        }
        assert!(temporal_attend(&Tensor::<f64>::zeros(&[0, 2, 2, 8]), &layer, &store).is_err());
    }

    #[test]
    fn sinusoid_starts_at_sin0_cos0() {
        let e: Tensor<f64> = sinusoidal(&[0, 5], 4);
        assert_eq!(&e.data()[..4], &[0.0, 0.0, 1.0, 1.0]);
    }
}
