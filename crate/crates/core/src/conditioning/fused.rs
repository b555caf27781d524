//! Composed-decoding cross-attention.
//!
//! ```text
//! Z_full = λ softmax(Q K_bg^T / √d) V + softmax(Q K_noise^T / √d) V
//! Q = Z_enc W_Q,  K_bg = Z_bg W_K,  K_noise = Z_enc W_K,  V = F_id W_V
//! ```
//!
//! One `W_K` serves both key streams. Keys come from latent tokens while
//! values come from the `K` identity tokens, so each key token `j` of an
//! `n`-token stream is paired with value row `floor(j K / n)`. When `n == K`
//! this is the plain product above. Heads split the projected width evenly
//! and are evaluated independently, then concatenated.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Value row paired with key token `j` of an `n`-token stream.
pub fn value_row(j: usize, n: usize, k: usize) -> usize {
    j * k / n
}

/// Projection matrices of one fused cross-attention site.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProjections<T> {
    /// `[C, D]`
    pub w_q: Tensor<T>,
    /// `[C, D]`, shared by both key streams.
    pub w_k: Tensor<T>,
    /// `[E, Dv]`
    pub w_v: Tensor<T>,
    pub heads: usize,
}

impl<T: Scalar> AttentionProjections<T> {
    /// Per-head key dimension `d`.
    pub fn key_dim(&self) -> usize {
        self.w_q.dim(1) / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let (q, k, v) = (self.w_q.shape(), self.w_k.shape(), self.w_v.shape());
        if q.len() != 2 || k.len() != 2 || v.len() != 2 {
            return Err(Error::invalid("projections must be matrices"));
        }
        if q != k {
            return Err(Error::shape("W_K vs W_Q", q, k));
        }
        if self.heads == 0 || q[1] % self.heads != 0 || v[1] % self.heads != 0 || q[1] == 0 {
            return Err(Error::invalid("projection widths must split evenly into a positive head count"));
        }
        Ok(())
    }
}

/// Graph form of the fused attention for `frames` frames stacked along
/// rows. `z_enc` is `[F*n, C]`, `z_bg` is `[F*m, C]`, `ids` is `[K, E]`.
/// Without `z_bg` only the self-key term is evaluated.
#[allow(clippy::too_many_arguments)]
pub fn fused_attention<T: Scalar>(
    g: &mut Graph<T>,
    z_enc: Var,
    z_bg: Option<Var>,
    ids: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    frames: usize,
    heads: usize,
    lambda: T,
) -> Result<Var> {
    if frames == 0 {
        return Err(Error::invalid("fused attention needs at least one frame"));
    }
    let rows = g.shape(z_enc)[0];
    if rows % frames != 0 {
        return Err(Error::invalid("encoder tokens not divisible by frame count"));
    }
    let n = rows / frames;
    let kk = g.shape(ids)[0];
    if kk == 0 {
        return Err(Error::invalid("identity embedding has no tokens"));
    }
    let d = g.shape(w_q)[1] / heads.max(1);
    let scale = T::one() / T::from_usize_lossy(d.max(1)).sqrt();
    let q = g.matmul(z_enc, w_q)?;
    let k_noise = g.matmul(z_enc, w_k)?;
    let v = g.matmul(ids, w_v)?;
    let expand = |g: &mut Graph<T>, n: usize| {
        let idx = (0..frames).flat_map(|_| (0..n).map(|j| value_row(j, n, kk))).collect();
        g.gather_rows(v, idx)
    };
    let v_noise = expand(g, n)?;
    let self_term = g.attention(q, k_noise, v_noise, frames, heads, scale)?;
    let Some(z_bg) = z_bg else {
        return Ok(self_term);
    };
    let bg_rows = g.shape(z_bg)[0];
    if bg_rows % frames != 0 || bg_rows == 0 {
        return Err(Error::invalid("background tokens not divisible by frame count"));
    }
    let m = bg_rows / frames;
    let k_bg = g.matmul(z_bg, w_k)?;
    let v_bg = expand(g, m)?;
    let bg_term = g.attention(q, k_bg, v_bg, frames, heads, scale)?;
    let bg_term = g.scale(bg_term, lambda);
    g.add(bg_term, self_term)
}

/// Evaluates the fused attention on plain tensors. `z_enc` is `[F, n, C]`,
/// `z_bg` is `[F, m, C]`, `ids` is `[K, E]`; the result is `[F, n, Dv]`.
pub fn fused_cross_attention<T: Scalar>(
    z_enc: &Tensor<T>,
    z_bg: &Tensor<T>,
    ids: &Tensor<T>,
    proj: &AttentionProjections<T>,
    lambda: T,
) -> Result<Tensor<T>> {
    proj.validate()?;
    let (es, bs, is) = (z_enc.shape(), z_bg.shape(), ids.shape());
    if es.len() != 3 || bs.len() != 3 || is.len() != 2 {
        return Err(Error::invalid("expected [F, n, C] latents and [K, E] identity tokens"));
    }
    if es[0] != bs[0] {
        return Err(Error::shape("background frames", &es[..1], &bs[..1]));
    }
    if es[2] != proj.w_q.dim(0) || bs[2] != proj.w_k.dim(0) {
        return Err(Error::shape("latent width vs W_Q/W_K", &[proj.w_q.dim(0)], &[es[2], bs[2]]));
    }
    if is[1] != proj.w_v.dim(0) {
        return Err(Error::shape("identity width vs W_V", &[proj.w_v.dim(0)], &[is[1]]));
    }
    if es[1] == 0 || bs[1] == 0 || is[0] == 0 {
        return Err(Error::invalid("token sets must be nonempty"));
    }
    let (f, n) = (es[0], es[1]);
    let mut g = Graph::new();
    let ze = g.constant(z_enc.clone().reshape(&[f * n, es[2]])?);
    let zb = g.constant(z_bg.clone().reshape(&[f * bs[1], bs[2]])?);
    let id = g.constant(ids.clone());
    let wq = g.constant(proj.w_q.clone());
    let wk = g.constant(proj.w_k.clone());
    let wv = g.constant(proj.w_v.clone());
    let out = fused_attention(&mut g, ze, Some(zb), id, wq, wk, wv, f, proj.heads, lambda)?;
    g.value(out).clone().reshape(&[f, n, proj.w_v.dim(1)])
}

/// Cross-attention site of the denoiser: pre-norm, fused attention, output
/// projection, residual. Encoder-half sites omit the background term.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub uses_background: bool,
}

impl CrossAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
        id_dim: usize,
        heads: usize,
        uses_background: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.to_q"), group, dim, dim, false, 1.0, rng),
            k: Linear::new(store, &format!("{name}.to_k"), group, dim, dim, false, 1.0, rng),
            v: Linear::new(store, &format!("{name}.to_v"), group, id_dim, dim, false, 1.0, rng),
            o: Linear::new(store, &format!("{name}.to_out"), group, dim, dim, true, 0.5, rng),
            heads,
            uses_background,
        }
    }

    pub fn projections<T: Scalar>(&self, store: &ParamStore<T>) -> AttentionProjections<T> {
        AttentionProjections {
            w_q: store.get(self.q.w).clone(),
            w_k: store.get(self.k.w).clone(),
            w_v: store.get(self.v.w).clone(),
            heads: self.heads,
        }
    }

    /// `x` is `[F*n, C]`; `bg` is `[F*m, C]` and required iff this site
    /// uses the background; `ids` is `[K, E]`.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        frames: usize,
        bg: Option<Var>,
        ids: Var,
        lambda: T,
    ) -> Result<Var> {
        if bg.is_some() != self.uses_background {
            return Err(Error::invalid(if self.uses_background {
                "decoder cross-attention needs background features"
            } else {
                "encoder cross-attention takes no background features"
            }));
        }
        let xn = ctx.layer_norm(x);
        let bn = bg.map(|b| ctx.layer_norm(b));
        let (wq, wk, wv) = (ctx.p(self.q.w), ctx.p(self.k.w), ctx.p(self.v.w));
        let z = fused_attention(ctx, xn, bn, ids, wq, wk, wv, frames, self.heads, lambda)?;
        let o = self.o.forward(ctx, z)?;
        ctx.add(x, o)
    }
}
