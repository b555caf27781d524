//! Scalar-loop reference for the fused decoding attention.

use cfsynth::conditioning::{value_row, AttentionProjections};
use cfsynth::Tensor;
use rand_chacha::ChaCha8Rng;

fn row(t: &Tensor<f64>, r: usize) -> &[f64] {
    let c = t.shape()[t.ndim() - 1];
    &t.data()[r * c..(r + 1) * c]
}

fn project(x: &[f64], w: &Tensor<f64>, cols: std::ops::Range<usize>) -> Vec<f64> {
    let d_out = w.dim(1);
    cols.map(|o| x.iter().enumerate().map(|(i, xi)| xi * w.data()[i * d_out + o]).sum())
        .collect()
}

/// Softmax-weighted sum over one key stream for one query and one head.
fn attend(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let logits: Vec<f64> = keys.iter().map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![0.0; values[0].len()];
    for (wj, v) in w.iter().zip(values) {
        for (o, vi) in out.iter_mut().zip(v) {
            *o += wj / z * vi;
        }
    }
    out
}

/// Scalar-loop evaluation of the composed decoding attention.
pub fn fused_oracle(
    z_enc: &Tensor<f64>,
    z_bg: &Tensor<f64>,
    ids: &Tensor<f64>,
    p: &AttentionProjections<f64>,
    lambda: f64,
) -> Tensor<f64> {
    let (f, n, m, k) = (z_enc.dim(0), z_enc.dim(1), z_bg.dim(1), ids.dim(0));
    let (d, dv) = (p.w_q.dim(1) / p.heads, p.w_v.dim(1) / p.heads);
    let mut out = Vec::new();
    for fr in 0..f {
        for i in 0..n {
            for h in 0..p.heads {
                let kc = h * d..(h + 1) * d;
                let vc = h * dv..(h + 1) * dv;
                let q = project(row(z_enc, fr * n + i), &p.w_q, kc.clone());
                let stream = |src: &Tensor<f64>, len: usize| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
                    (0..len)
                        .map(|j| {
                            let key = project(row(src, fr * len + j), &p.w_k, kc.clone());
                            let val = project(row(ids, value_row(j, len, k)), &p.w_v, vc.clone());
                            (key, val)
                        })
                        .unzip()
                };
                let (kn, vn) = stream(z_enc, n);
                let (kb, vb) = stream(z_bg, m);
                let own = attend(&q, &kn, &vn);
                let bg = attend(&q, &kb, &vb);
                out.extend(own.iter().zip(&bg).map(|(a, b)| a + lambda * b));
            }
        }
    }
    Tensor::new(&[f, n, p.w_v.dim(1)], out).unwrap()
}

pub fn random_projections(rng: &mut ChaCha8Rng, c: usize, e: usize, width: usize, heads: usize) -> AttentionProjections<f64> {
    AttentionProjections {
        w_q: Tensor::randn(&[c, width], rng),
        w_k: Tensor::randn(&[c, width], rng),
        w_v: Tensor::randn(&[e, width], rng),
        heads,
    }
}
