//! Frame metrics (L1, PSNR, SSIM) and the Fréchet distance between
//! Gaussian fits of embedding sets.
//!
//! All metrics take `[H, W, 3]` images with values in `[0, 1]` and compute in
//! `f64`. L1 is the plain mean absolute error in `[0, 1]` units.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reported PSNR for identical frames.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

fn check_pair<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("metric input", gt.shape(), pred.shape()));
    }
    if pred.is_empty() {
        return Err(Error::invalid("metric input is empty"));
    }
    Ok(())
}

/// Mean absolute difference over pixels and channels.
pub fn l1_error<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    check_pair(pred, gt)?;
    let s: f64 = pred.data().iter().zip(gt.data()).map(|(a, b)| (a.f64() - b.f64()).abs()).sum();
    Ok(s / pred.len() as f64)
}

pub fn mse<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    check_pair(pred, gt)?;
    let s: f64 = pred.data().iter().zip(gt.data()).map(|(a, b)| (a.f64() - b.f64()).powi(2)).sum();
    Ok(s / pred.len() as f64)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let m = mse(pred, gt)?;
    Ok(if m <= 0.0 { PSNR_CAP } else { (-10.0 * m.log10()).min(PSNR_CAP) })
}

/// Luma `0.299 R + 0.587 G + 0.114 B` as a row-major `h * w` plane.
pub fn luma<T: Scalar>(img: &Tensor<T>) -> Result<Vec<f64>> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::invalid(format!("expected an [H, W, 3] image, got {s:?}")));
    }
    Ok(img
        .data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0].f64() + 0.587 * p[1].f64() + 0.114 * p[2].f64())
        .collect())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..window).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = taps.iter().enumerate().map(|(i, t)| t * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = taps.iter().enumerate().map(|(i, t)| t * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

/// Mean SSIM of the luma planes over all fully contained Gaussian windows.
pub fn ssim_with<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, cfg: &SsimConfig) -> Result<f64> {
    check_pair(pred, gt)?;
    let (a, b) = (luma(pred)?, luma(gt)?);
    let (h, w) = (pred.dim(0), pred.dim(1));
    if h < cfg.window || w < cfg.window || cfg.window == 0 {
        return Err(Error::invalid(format!("image {h}x{w} is smaller than the {} px SSIM window", cfg.window)));
    }
    let taps = gaussian_taps(cfg.window, cfg.sigma);
    let f = |v: &[f64]| filter_valid(v, h, w, &taps);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mu_a, mu_b) = (f(&a), f(&b));
    let (e_aa, e_bb, e_ab) = (f(&prod(&a, &a)), f(&prod(&b, &b)), f(&prod(&a, &b)));
    let (c1, c2) = (cfg.k1.powi(2), cfg.k2.powi(2));
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

pub fn ssim<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    ssim_with(pred, gt, &SsimConfig::default())
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and column eigenvectors (row-major `n x n`).
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        return Err(Error::shape("symmetric matrix", &[n, n], &[a.len()]));
    }
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = m.iter().map(|x| x.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * n + j].powi(2)).sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Ok(((0..n).map(|i| m[i * n + i]).collect(), v))
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Principal square root of a symmetric positive semi-definite matrix;
/// negative round-off eigenvalues are clamped to zero.
pub fn psd_sqrt(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let (vals, vecs) = symmetric_eigen(a, n)?;
    let mut out = vec![0.0; n * n];
    for (k, l) in vals.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] += s * vecs[i * n + k] * vecs[j * n + k];
            }
        }
    }
    Ok(out)
}

/// Mean and unbiased covariance of a set of equal-length vectors.
pub fn gaussian_fit(samples: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples.len() < 2 {
        return Err(Error::invalid("a Gaussian fit needs at least 2 samples"));
    }
    let d = samples[0].len();
    if d == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(Error::invalid("embedding vectors must share a positive length"));
    }
    let n = samples.len() as f64;
    let mut mu = vec![0.0; d];
    for s in samples {
        for (m, v) in mu.iter_mut().zip(s) {
            *m += v / n;
        }
    }
    let mut cov = vec![0.0; d * d];
    for s in samples {
        for i in 0..d {
            let di = s[i] - mu[i];
            for j in 0..d {
                cov[i * d + j] += di * (s[j] - mu[j]) / (n - 1.0);
            }
        }
    }
    Ok((mu, cov))
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`. The trace of the
/// square root is taken through the symmetric form `S1^(1/2) S2 S1^(1/2)`.
pub fn frechet_distance(mu1: &[f64], s1: &[f64], mu2: &[f64], s2: &[f64]) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.len() != d * d || s2.len() != d * d {
        return Err(Error::invalid("Gaussian fits have mismatched dimensions"));
    }
    let mean_term: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b).powi(2)).sum();
    let r1 = psd_sqrt(s1, d)?;
    let mut inner = matmul(&matmul(&r1, s2, d), &r1, d);
    // Symmetrize away round-off before the eigen-solve.
    for i in 0..d {
        for j in i + 1..d {
            let avg = 0.5 * (inner[i * d + j] + inner[j * d + i]);
            inner[i * d + j] = avg;
            inner[j * d + i] = avg;
        }
    }
    let (vals, _) = symmetric_eigen(&inner, d)?;
    let tr_sqrt: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
    let tr: f64 = (0..d).map(|i| s1[i * d + i] + s2[i * d + i]).sum();
    Ok((mean_term + tr - 2.0 * tr_sqrt).max(0.0))
}

/// Maps a frame to a feature vector.
pub trait Embedder {
    fn embed(&self, frame: &Tensor<f64>) -> Result<Vec<f64>>;
}

/// Block-averages a frame onto a `grid x grid` RGB thumbnail and applies a
/// fixed Gaussian random projection. A stand-in for a learned feature
/// network; distances are only comparable under the same seed.
#[derive(Debug, Clone)]
pub struct RandomProjectionEmbedder {
    pub grid: usize,
    pub dim: usize,
    projection: Vec<f64>,
}

impl RandomProjectionEmbedder {
    pub fn new(grid: usize, dim: usize, seed: u64) -> Self {
        let inputs = grid * grid * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (inputs as f64).sqrt();
        let projection = (0..dim * inputs)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self { grid, dim, projection }
    }
}

impl Default for RandomProjectionEmbedder {
    fn default() -> Self {
        Self::new(8, 16, 0x5eed)
    }
}

impl Embedder for RandomProjectionEmbedder {
    fn embed(&self, frame: &Tensor<f64>) -> Result<Vec<f64>> {
        let s = frame.shape();
        let g = self.grid;
        if s.len() != 3 || s[2] != 3 || s[0] < g || s[1] < g {
            return Err(Error::invalid(format!("cannot embed a {s:?} frame on a {g}x{g} grid")));
        }
        let (h, w) = (s[0], s[1]);
        let mut thumb = vec![0.0; g * g * 3];
        for gy in 0..g {
            for gx in 0..g {
                let (y0, y1) = (gy * h / g, (gy + 1) * h / g);
                let (x0, x1) = (gx * w / g, (gx + 1) * w / g);
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        for c in 0..3 {
                            thumb[(gy * g + gx) * 3 + c] += frame.data()[(y * w + x) * 3 + c] / count;
                        }
                    }
                }
            }
        }
        let n = thumb.len();
        Ok((0..self.dim)
            .map(|r| self.projection[r * n..(r + 1) * n].iter().zip(&thumb).map(|(p, v)| p * v).sum())
            .collect())
    }
}

/// Fréchet distance between the embeddings of two frame sets.
pub fn feature_distance<T: Scalar, E: Embedder + ?Sized>(pred: &[Tensor<T>], gt: &[Tensor<T>], embedder: &E) -> Result<f64> {
    if pred.len() < 2 || gt.len() < 2 {
        return Err(Error::invalid("feature distance needs at least 2 frames per set"));
    }
    let embed = |set: &[Tensor<T>]| set.iter().map(|f| embedder.embed(&f.cast())).collect::<Result<Vec<_>>>();
    let (m1, s1) = gaussian_fit(&embed(pred)?)?;
    let (m2, s2) = gaussian_fit(&embed(gt)?)?;
    frechet_distance(&m1, &s1, &m2, &s2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Aggregate block in the usual column order. Slots that need pretrained
/// perceptual networks are always null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub clip: String,
    pub frames: usize,
    #[serde(rename = "L1")]
    pub l1: f64,
    #[serde(rename = "PSNR")]
    pub psnr: f64,
    #[serde(rename = "SSIM")]
    pub ssim: f64,
    #[serde(rename = "LPIPS")]
    pub lpips: Option<f64>,
    #[serde(rename = "FID-VID")]
    pub fid_vid: Option<f64>,
    #[serde(rename = "FVD")]
    pub fvd: Option<f64>,
    /// Fréchet distance under the random-projection embedder; null with
    /// fewer than two frames.
    pub feature_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
    pub summary: MetricSummary,
}

/// Per-frame metrics and their means.
pub fn evaluate_frames<T: Scalar>(pred: &[Tensor<T>], gt: &[Tensor<T>], clip: &str) -> Result<MetricReport> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!("{} predicted frames but {} reference frames", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::invalid("no frames to evaluate"));
    }
    let frames = pred
        .iter()
        .zip(gt)
        .enumerate()
        .map(|(frame, (p, g))| {
            Ok(FrameMetrics {
                frame,
                l1: l1_error(p, g)?,
                psnr: psnr(p, g)?,
                ssim: ssim(p, g)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = frames.len() as f64;
    let mean = |f: fn(&FrameMetrics) -> f64| frames.iter().map(f).sum::<f64>() / n;
    let feature_distance = if pred.len() >= 2 {
        Some(feature_distance(pred, gt, &RandomProjectionEmbedder::default())?)
    } else {
        None
    };
    let summary = MetricSummary {
        clip: clip.to_string(),
        frames: frames.len(),
        l1: mean(|m| m.l1),
        psnr: mean(|m| m.psnr),
        ssim: mean(|m| m.ssim),
        lpips: None,
        fid_vid: None,
        fvd: None,
        feature_distance,
    };
    Ok(MetricReport { frames, summary })
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ReportLine {
    Summary { summary: MetricSummary },
    Frame(FrameMetrics),
}

/// One JSON line per frame, then a `{"summary": ...}` line.
pub fn write_report(path: &Path, report: &MetricReport) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = Vec::new();
    for f in &report.frames {
        serde_json::to_writer(&mut out, f).expect("metrics serialize");
        out.push(b'\n');
    }
    let summary = ReportLine::Summary {
        summary: report.summary.clone(),
    };
    serde_json::to_writer(&mut out, &summary).expect("metrics serialize");
    out.push(b'\n');
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<MetricReport> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut frames = Vec::new();
    let mut summary = None;
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ReportLine>(&line) {
            Ok(ReportLine::Frame(f)) => frames.push(f),
            Ok(ReportLine::Summary { summary: s }) => summary = Some(s),
            Err(e) => return Err(Error::format("metric report", format!("{} line {}: {e}", path.display(), i + 1))),
        }
    }
    let summary = summary.ok_or_else(|| Error::format("metric report", format!("{} has no summary line", path.display())))?;
    Ok(MetricReport { frames, summary })
}

/// PNG files of a directory in name order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn load_frames(dir: &Path) -> Result<Vec<Tensor<f64>>> {
    list_frames(dir)?.iter().map(|p| imaging::load_png_rgb(p)).collect()
}
