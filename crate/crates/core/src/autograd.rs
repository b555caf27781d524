//! Tape-based reverse-mode differentiation over [`Tensor`].
//!
//! Every op evaluates eagerly and records its inputs. Nodes that do not
//! depend on a gradient-requiring leaf are never visited by `backward`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    AddFrameBias(Var, Var),
    MatMul(Var, Var),
    Silu(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    Conv2d { x: Var, w: Var, spec: ConvSpec },
    Upsample2(Var),
    ConcatLast(Var, Var),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        scale: T,
        probs: Vec<T>,
    },
    Mse(Var, Var),
}

#[derive(Debug, Clone, Copy)]
struct AttnDims {
    groups: usize,
    heads: usize,
    m: usize,
    n: usize,
    d: usize,
    dv: usize,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Strided matrix view into a flat buffer.
#[derive(Debug, Clone, Copy)]
struct View {
    off: usize,
    rs: usize,
    cs: usize,
}

impl View {
    fn rows(off: usize, row_stride: usize) -> Self {
        View {
            off,
            rs: row_stride,
            cs: 1,
        }
    }

    fn t(self) -> Self {
        View {
            off: self.off,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = alpha * a[m,k]·b[k,n] + beta * c` over strided views.
#[allow(clippy::too_many_arguments)]
fn gemm_view<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    beta: T,
    c: &mut [T],
    cv: View,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let last = |v: View, r: usize, cc: usize| v.off + (r - 1) * v.rs + (cc - 1) * v.cs;
    assert!(last(av, m, k) < a.len(), "gemm_view: lhs out of bounds");
    assert!(last(bv, k, n) < b.len(), "gemm_view: rhs out of bounds");
    assert!(last(cv, m, n) < c.len(), "gemm_view: out of bounds");
    // SAFETY: the farthest reachable element of each view is in bounds.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.off),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.off),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn conv_out(size: usize, k: usize, spec: ConvSpec) -> usize {
    (size + 2 * spec.pad - k) / spec.stride + 1
}

struct ConvGeom {
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.ci
    }

    fn rows(&self) -> usize {
        self.b * self.ho * self.wo
    }

    /// Calls `f(col_index, input_index)` for every in-bounds tap, in
    /// row-major column order.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let patch = self.patch();
        for bi in 0..self.b {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (bi * self.ho + oy) * self.wo + ox;
                    for ky in 0..self.kh {
                        let iy = (oy * self.spec.stride + ky) as isize - self.spec.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix =
                                (ox * self.spec.stride + kx) as isize - self.spec.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let col = row * patch + (ky * self.kw + kx) * self.ci;
                            let src = ((bi * self.h + iy as usize) * self.w + ix as usize) * self.ci;
                            f(col, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut cols = vec![T::zero(); self.rows() * self.patch()];
        let ci = self.ci;
        self.for_each_tap(|col, src| cols[col..col + ci].copy_from_slice(&x[src..src + ci]));
        cols
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to an external parameter key; bound once per graph.
    pub fn param(&mut self, key: usize, value: &Tensor<T>, requires_grad: bool) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, requires_grad);
        self.params.insert(key, v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.params.iter().map(|(&k, &v)| (k, v))
    }

    fn same_shape(&self, a: Var, b: Var, ctx: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(ctx, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// `x[..., C] + b[C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [c] {
            return Err(Error::shape("add_bias", &[c], self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(v, Op::AddBias(x, b), ng))
    }

    /// `x[B, ..., C] + b[B, C]`, broadcasting over the middle axes.
    pub fn add_frame_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap_or(&0);
        if self.shape(b) != [xs[0], c] {
            return Err(Error::shape("add_frame_bias", &[xs[0], c], self.shape(b)));
        }
        let per_frame = self.value(x).len() / xs[0];
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (f, frame) in v.data_mut().chunks_mut(per_frame).enumerate() {
            let bf = &bias[f * c..(f + 1) * c];
            for row in frame.chunks_mut(c) {
                for (o, &bb) in row.iter_mut().zip(bf) {
                    *o += bb;
                }
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(v, Op::AddFrameBias(x, b), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| z * sigmoid(z));
        let ng = self.ng(x);
        self.push(v, Op::Silu(x), ng)
    }

    /// Normalizes each row over the last axis to zero mean and unit
    /// variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let eps = T::c(1e-5);
        let c = *self.shape(x).last().unwrap_or(&1);
        let mut v = self.value(x).clone();
        let rows = v.len() / c.max(1);
        let mut inv_std = Vec::with_capacity(rows);
        let cf = T::from_usize_lossy(c);
        for row in v.data_mut().chunks_mut(c) {
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&z| (z - mean) * (z - mean)).sum::<T>() / cf;
            let is = T::one() / (var + eps).sqrt();
            for z in row.iter_mut() {
                *z = (*z - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(x);
        self.push(v, Op::LayerNorm { x, inv_std }, ng)
    }

    fn conv_geom(&self, x: Var, w: Var, spec: ConvSpec) -> Result<ConvGeom> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 || xs[3] != ws[2] {
            return Err(Error::shape("conv2d", ws, xs));
        }
        if xs[1] + 2 * spec.pad < ws[0] || xs[2] + 2 * spec.pad < ws[1] || spec.stride == 0 {
            return Err(Error::invalid("conv2d kernel larger than padded input"));
        }
        Ok(ConvGeom {
            b: xs[0],
            h: xs[1],
            w: xs[2],
            ci: xs[3],
            kh: ws[0],
            kw: ws[1],
            co: ws[3],
            ho: conv_out(xs[1], ws[0], spec),
            wo: conv_out(xs[2], ws[1], spec),
            spec,
        })
    }

    /// 2-D convolution, `x[B,H,W,Ci]` with `w[kh,kw,Ci,Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let g = self.conv_geom(x, w, spec)?;
        let cols = g.im2col(self.value(x).data());
        let mut out = vec![T::zero(); g.rows() * g.co];
        gemm(
            g.rows(),
            g.patch(),
            g.co,
            T::one(),
            &cols,
            false,
            self.value(w).data(),
            false,
            T::zero(),
            &mut out,
        );
        let v = Tensor::new(&[g.b, g.ho, g.wo, g.co], out)?;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(v, Op::Conv2d { x, w, spec }, ng))
    }

    /// Nearest-neighbour 2x upsampling of `[B,H,W,C]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::invalid("upsample2 expects [B,H,W,C]"));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); b * 4 * h * w * c];
        for bi in 0..b {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let si = ((bi * h + y / 2) * w + xx / 2) * c;
                    let di = ((bi * 2 * h + y) * 2 * w + xx) * c;
                    out[di..di + c].copy_from_slice(&src[si..si + c]);
                }
            }
        }
        let v = Tensor::new(&[b, 2 * h, 2 * w, c], out)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Upsample2(x), ng))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat_last", &sa, &sb));
        }
        let ca = *sa.last().unwrap();
        let cb = *sb.last().unwrap();
        let rows = self.value(a).len() / ca.max(1);
        let mut out = Vec::with_capacity(rows * (ca + cb));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for r in 0..rows {
            out.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let v = Tensor::new(&shape, out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::ConcatLast(a, b), ng))
    }

    /// Stacks 2-D `[R_i, C]` blocks along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.row_width(parts[0])?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pc = self.row_width(p)?;
            if pc != c {
                return Err(Error::shape("concat_rows", &[c], &[pc]));
            }
            rows += self.value(p).len() / c;
            out.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(&[rows, c], out)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), ng))
    }

    fn row_width(&self, x: Var) -> Result<usize> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::invalid(format!("expected a 2-D tensor, got {s:?}")));
        }
        Ok(s[1])
    }

    /// Selects rows of a 2-D tensor; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let c = self.row_width(x)?;
        let rows = self.shape(x)[0];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            if i >= rows {
                return Err(Error::invalid(format!("gather index {i} out of {rows} rows")));
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let v = Tensor::new(&[idx.len(), c], out)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::GatherRows { x, idx }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    /// Grouped multi-head scaled dot-product attention.
    ///
    /// `q` is `[G*m, H*d]`, `k` is `[G*n, H*d]`, `v` is `[G*n, H*dv]`; each
    /// of the `G` groups and `H` heads attends independently. Output is
    /// `[G*m, H*dv]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        scale: T,
    ) -> Result<Var> {
        let (qs, ks, vs) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || groups == 0 || heads == 0 {
            return Err(Error::invalid("attention expects 2-D q/k/v and nonzero groups/heads"));
        }
        if qs[0] % groups != 0 || ks[0] % groups != 0 || ks[0] != vs[0] {
            return Err(Error::shape("attention rows", &qs, &ks));
        }
        if qs[1] != ks[1] || qs[1] % heads != 0 || vs[1] % heads != 0 {
            return Err(Error::shape("attention width", &qs, &ks));
        }
        let dims = AttnDims {
            groups,
            heads,
            m: qs[0] / groups,
            n: ks[0] / groups,
            d: qs[1] / heads,
            dv: vs[1] / heads,
        };
        if dims.n == 0 {
            return Err(Error::invalid("attention over zero keys"));
        }
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let AttnDims { m, n, d, dv, .. } = dims;
        let mut probs = vec![T::zero(); groups * heads * m * n];
        let mut out = vec![T::zero(); groups * m * heads * dv];
        for g in 0..groups {
            for h in 0..heads {
                let p_off = (g * heads + h) * m * n;
                let pv = View::rows(p_off, n);
                gemm_view(
                    m,
                    d,
                    n,
                    scale,
                    qd,
                    View::rows(g * m * heads * d + h * d, heads * d),
                    kd,
                    View::rows(g * n * heads * d + h * d, heads * d).t(),
                    T::zero(),
                    &mut probs,
                    pv,
                );
                for row in probs[p_off..p_off + m * n].chunks_mut(n) {
                    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                    let mut s = T::zero();
                    for z in row.iter_mut() {
                        *z = (*z - mx).exp();
                        s += *z;
                    }
                    for z in row.iter_mut() {
                        *z /= s;
                    }
                }
                gemm_view(
                    m,
                    n,
                    dv,
                    T::one(),
                    &probs,
                    pv,
                    vd,
                    View::rows(g * n * heads * dv + h * dv, heads * dv),
                    T::zero(),
                    &mut out,
                    View::rows(g * m * heads * dv + h * dv, heads * dv),
                );
            }
        }
        let value = Tensor::new(&[groups * m, heads * dv], out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                dims,
                scale,
                probs,
            },
            ng,
        ))
    }

    /// Attention probabilities recorded by an [`Graph::attention`] node,
    /// laid out `[G, H, m, n]`.
    pub fn attention_probs(&self, out: Var) -> Option<&[T]> {
        match &self.nodes[out.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = T::from_usize_lossy(self.value(a).len().max(1));
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid("backward requires a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Grads { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += *x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, gy.zip_map(self.value(*b), |g, y| g * y)?);
                }
                if self.ng(*b) {
                    self.acc(grads, *b, gy.zip_map(self.value(*a), |g, x| g * x)?);
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, gy.scale(*s)),
            Op::AddBias(x, b) => {
                self.acc(grads, *x, gy.clone());
                if self.ng(*b) {
                    let c = self.value(*b).len();
                    let mut gb = vec![T::zero(); c];
                    for row in gy.data().chunks(c) {
                        for (o, &g) in gb.iter_mut().zip(row) {
                            *o += g;
                        }
                    }
                    self.acc(grads, *b, Tensor::new(&[c], gb)?);
                }
            }
            Op::AddFrameBias(x, b) => {
                self.acc(grads, *x, gy.clone());
                if self.ng(*b) {
                    let bs = self.shape(*b).to_vec();
                    let (frames, c) = (bs[0], bs[1]);
                    let per_frame = gy.len() / frames;
                    let mut gb = vec![T::zero(); frames * c];
                    for (f, frame) in gy.data().chunks(per_frame).enumerate() {
                        for row in frame.chunks(c) {
                            for (o, &g) in gb[f * c..(f + 1) * c].iter_mut().zip(row) {
                                *o += g;
                            }
                        }
                    }
                    self.acc(grads, *b, Tensor::new(&bs, gb)?);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.dim(0), av.dim(1), bv.dim(1));
                if self.ng(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, T::one(), gy.data(), false, bv.data(), true, T::zero(), &mut ga);
                    self.acc(grads, *a, Tensor::new(&[m, k], ga)?);
                }
                if self.ng(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, T::one(), av.data(), true, gy.data(), false, T::zero(), &mut gb);
                    self.acc(grads, *b, Tensor::new(&[k, n], gb)?);
                }
            }
            Op::Silu(x) => {
                let g = gy.zip_map(self.value(*x), |g, z| {
                    let s = sigmoid(z);
                    g * s * (T::one() + z * (T::one() - s))
                })?;
                self.acc(grads, *x, g);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let c = *y.shape().last().unwrap();
                let cf = T::from_usize_lossy(c);
                let mut gx = vec![T::zero(); y.len()];
                for (r, ((gr, yr), out)) in gy
                    .data()
                    .chunks(c)
                    .zip(y.data().chunks(c))
                    .zip(gx.chunks_mut(c))
                    .enumerate()
                {
                    let mean_g = gr.iter().copied().sum::<T>() / cf;
                    let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / cf;
                    for ((o, &g), &yy) in out.iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (g - mean_g - yy * mean_gy);
                    }
                }
                self.acc(grads, *x, Tensor::new(y.shape(), gx)?);
            }
            Op::Conv2d { x, w, spec } => {
                let g = self.conv_geom(*x, *w, *spec)?;
                if self.ng(*w) {
                    let cols = g.im2col(self.value(*x).data());
                    let mut gw = vec![T::zero(); g.patch() * g.co];
                    gemm(
                        g.patch(),
                        g.rows(),
                        g.co,
                        T::one(),
                        &cols,
                        true,
                        gy.data(),
                        false,
                        T::zero(),
                        &mut gw,
                    );
                    self.acc(grads, *w, Tensor::new(self.shape(*w), gw)?);
                }
                if self.ng(*x) {
                    let mut gcols = vec![T::zero(); g.rows() * g.patch()];
                    gemm(
                        g.rows(),
                        g.co,
                        g.patch(),
                        T::one(),
                        gy.data(),
                        false,
                        self.value(*w).data(),
                        true,
                        T::zero(),
                        &mut gcols,
                    );
                    let mut gx = vec![T::zero(); self.value(*x).len()];
                    let ci = g.ci;
                    g.for_each_tap(|col, src| {
                        for (o, &v) in gx[src..src + ci].iter_mut().zip(&gcols[col..col + ci]) {
                            *o += v;
                        }
                    });
                    self.acc(grads, *x, Tensor::new(self.shape(*x), gx)?);
                }
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x).to_vec();
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let mut gx = vec![T::zero(); b * h * w * c];
                let gd = gy.data();
                for bi in 0..b {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let di = ((bi * h + y / 2) * w + xx / 2) * c;
                            let si = ((bi * 2 * h + y) * 2 * w + xx) * c;
                            for ch in 0..c {
                                gx[di + ch] += gd[si + ch];
                            }
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(&s, gx)?);
            }
            Op::ConcatLast(a, b) => {
                let ca = *self.shape(*a).last().unwrap();
                let cb = *self.shape(*b).last().unwrap();
                let rows = gy.len() / (ca + cb);
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for row in gy.data().chunks(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                self.acc(grads, *a, Tensor::new(self.shape(*a), ga)?);
                self.acc(grads, *b, Tensor::new(self.shape(*b), gb)?);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.ng(p) {
                        let g = Tensor::new(self.shape(p), gy.data()[off..off + len].to_vec())?;
                        self.acc(grads, p, g);
                    }
                    off += len;
                }
            }
            Op::GatherRows { x, idx } => {
                let c = self.shape(*x)[1];
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &g) in gx[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&gy.data()[r * c..(r + 1) * c])
                    {
                        *o += g;
                    }
                }
                self.acc(grads, *x, Tensor::new(self.shape(*x), gx)?);
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, gy.clone().reshape(self.shape(*x))?);
            }
            Op::Attention {
                q,
                k,
                v,
                dims,
                scale,
                probs,
            } => self.backprop_attention(*q, *k, *v, *dims, *scale, probs, gy, grads)?,
            Op::Mse(a, b) => {
                let n = T::from_usize_lossy(self.value(*a).len().max(1));
                let coef = gy.data()[0] * T::c(2.0) / n;
                let diff = self.value(*a).zip_map(self.value(*b), |x, y| (x - y) * coef)?;
                if self.ng(*b) {
                    self.acc(grads, *b, diff.scale(-T::one()));
                }
                self.acc(grads, *a, diff);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        scale: T,
        probs: &[T],
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let AttnDims {
            groups,
            heads,
            m,
            n,
            d,
            dv,
        } = dims;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let gyd = gy.data();
        let mut gq = vec![T::zero(); qd.len()];
        let mut gk = vec![T::zero(); kd.len()];
        let mut gv = vec![T::zero(); vd.len()];
        let mut dp = vec![T::zero(); m * n];
        for g in 0..groups {
            for h in 0..heads {
                let p_off = (g * heads + h) * m * n;
                let pv = View::rows(p_off, n);
                let gov = View::rows(g * m * heads * dv + h * dv, heads * dv);
                let vv = View::rows(g * n * heads * dv + h * dv, heads * dv);
                let qv = View::rows(g * m * heads * d + h * d, heads * d);
                let kv = View::rows(g * n * heads * d + h * d, heads * d);
                // dV += P^T dO
                gemm_view(n, m, dv, T::one(), probs, pv.t(), gyd, gov, T::one(), &mut gv, vv);
                // dP = dO V^T
                gemm_view(m, dv, n, T::one(), gyd, gov, vd, vv.t(), T::zero(), &mut dp, View::rows(0, n));
                // dS = P * (dP - rowsum(dP * P))
                for (prow, drow) in probs[p_off..p_off + m * n].chunks(n).zip(dp.chunks_mut(n)) {
                    let dot: T = prow.iter().zip(drow.iter()).map(|(&p, &dd)| p * dd).sum();
                    for (dd, &p) in drow.iter_mut().zip(prow) {
                        *dd = p * (*dd - dot);
                    }
                }
                let sv = View::rows(0, n);
                gemm_view(m, n, d, scale, &dp, sv, kd, kv, T::one(), &mut gq, qv);
                gemm_view(n, m, d, scale, &dp, sv.t(), qd, qv, T::one(), &mut gk, kv);
            }
        }
        self.acc(grads, q, Tensor::new(self.shape(q), gq)?);
        self.acc(grads, k, Tensor::new(self.shape(k), gk)?);
        self.acc(grads, v, Tensor::new(self.shape(v), gv)?);
        Ok(())
    }
}
