use rand::Rng;

use crate::autograd::{ConvSpec, Var};
use crate::error::{Error, Result};
use crate::nn::params::{Ctx, ParamGroup, ParamId, ParamInit, ParamStore};
use crate::scalar::Scalar;

/// Affine map over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let init = if gain == 0.0 {
            ParamInit::Zeros
        } else {
            ParamInit::FanIn { fan_in: d_in, gain }
        };
        let w = store.init(format!("{name}.weight"), group, &[d_in, d_out], init, rng);
        let b = bias.then(|| store.init(format!("{name}.bias"), group, &[d_out], ParamInit::Zeros, rng));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.shape(x).to_vec();
        if shape.last() != Some(&self.d_in) {
            return Err(Error::shape("linear input", &[self.d_in], &shape));
        }
        let rows = ctx.value(x).len() / self.d_in;
        let x2 = if shape.len() == 2 { x } else { ctx.reshape(x, &[rows, self.d_in])? };
        let w = ctx.p(self.w);
        let mut y = ctx.matmul(x2, w)?;
        if let Some(b) = self.b {
            let b = ctx.p(b);
            y = ctx.add_bias(y, b)?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = self.d_out;
            ctx.reshape(y, &out_shape)
        }
    }
}

/// Square-kernel 2-D convolution with bias over `[B,H,W,C]`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let init = if gain == 0.0 {
            ParamInit::Zeros
        } else {
            ParamInit::FanIn {
                fan_in: kernel * kernel * c_in,
                gain,
            }
        };
        let w = store.init(format!("{name}.weight"), group, &[kernel, kernel, c_in, c_out], init, rng);
        let b = store.init(format!("{name}.bias"), group, &[c_out], ParamInit::Zeros, rng);
        Self {
            w,
            b,
            spec: ConvSpec {
                stride,
                pad: kernel / 2,
            },
            c_in,
            c_out,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let b = ctx.p(self.b);
        let y = ctx.conv2d(x, w, self.spec)?;
        ctx.add_bias(y, b)
    }
}

/// Pre-norm multi-head self-attention over per-frame token sets with a
/// residual connection. Optional extra tokens are appended to every frame's
/// key/value set; queries come only from the frame's own tokens, so the
/// output keeps the frame's token count.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl SelfAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.to_q"), group, dim, dim, false, 1.0, rng),
            k: Linear::new(store, &format!("{name}.to_k"), group, dim, dim, false, 1.0, rng),
            v: Linear::new(store, &format!("{name}.to_v"), group, dim, dim, false, 1.0, rng),
            o: Linear::new(store, &format!("{name}.to_out"), group, dim, dim, true, out_gain, rng),
            heads,
            dim,
        }
    }

    /// `x` is `[frames * n, C]`; `extra`, when given, is `[m, C]` shared by
    /// every frame.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        frames: usize,
        extra: Option<Var>,
    ) -> Result<Var> {
        let rows = ctx.shape(x)[0];
        if frames == 0 || rows % frames != 0 {
            return Err(Error::invalid("self-attention rows not divisible by frame count"));
        }
        let n = rows / frames;
        let xn = ctx.layer_norm(x);
        let kv_in = match extra {
            None => xn,
            Some(e) => {
                let m = ctx.shape(e)[0];
                let en = ctx.layer_norm(e);
                let all = ctx.concat_rows(&[xn, en])?;
                let mut idx = Vec::with_capacity(frames * (n + m));
                for f in 0..frames {
                    idx.extend(f * n..(f + 1) * n);
                    idx.extend(rows..rows + m);
                }
                ctx.gather_rows(all, idx)?
            }
        };
        let q = self.q.forward(ctx, xn)?;
        let k = self.k.forward(ctx, kv_in)?;
        let v = self.v.forward(ctx, kv_in)?;
        let d = self.dim / self.heads;
        let a = ctx.attention(q, k, v, frames, self.heads, T::one() / T::from_usize_lossy(d).sqrt())?;
        let o = self.o.forward(ctx, a)?;
        ctx.add(x, o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn extra_tokens_are_shared_per_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let sa = SelfAttention::new(&mut store, "sa", ParamGroup::DenoiserSelfAttention, 4, 2, 1.0, &mut rng);
        let x = Tensor::randn(&[6, 4], &mut rng);
        let e = Tensor::randn(&[2, 4], &mut rng);
        let mut ctx = Ctx::inference(&store);
        let xv = ctx.constant(x.clone());
        let ev = ctx.constant(e.clone());
        let both = sa.forward(&mut ctx, xv, 2, Some(ev)).unwrap();
        let both = ctx.value(both).clone();
        // Frame 1 alone must give the same rows as in the batched call.
        let mut ctx = Ctx::inference(&store);
        let x1 = ctx.constant(Tensor::new(&[3, 4], x.data()[12..].to_vec()).unwrap());
        let ev = ctx.constant(e);
        let one = sa.forward(&mut ctx, x1, 1, Some(ev)).unwrap();
        let one = ctx.value(one);
        for (a, b) in both.data()[12..].iter().zip(one.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
