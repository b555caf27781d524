//! UV texture maps: extraction from an observed image and hole filling.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::{self, Mask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `[H, W, 3]` texels plus a validity mask; invalid texels are holes.
#[derive(Debug, Clone, PartialEq)]
pub struct UVTextureMap<T> {
    pub texels: Tensor<T>,
    pub validity: Mask,
}

impl<T: Scalar> UVTextureMap<T> {
    pub fn new(texels: Tensor<T>, validity: Mask) -> Result<Self> {
        let s = texels.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::invalid(format!("texture must be [H, W, 3], got {s:?}")));
        }
        if validity.height() != s[0] || validity.width() != s[1] {
            return Err(Error::shape("texture validity", &s[..2], &[validity.height(), validity.width()]));
        }
        if texels.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::invalid("texel value outside [0, 1]"));
        }
        Ok(Self { texels, validity })
    }

    /// Fully valid map.
    pub fn complete(texels: Tensor<T>) -> Result<Self> {
        let (h, w) = (texels.dim(0), texels.dim(1));
        Self::new(texels, Mask::filled(h, w, true))
    }

    pub fn height(&self) -> usize {
        self.texels.dim(0)
    }

    pub fn width(&self) -> usize {
        self.texels.dim(1)
    }

    pub fn is_complete(&self) -> bool {
        self.validity.data().iter().all(|&b| b)
    }

    pub fn texel(&self, row: usize, col: usize) -> [T; 3] {
        let i = (row * self.width() + col) * 3;
        let d = self.texels.data();
        [d[i], d[i + 1], d[i + 2]]
    }

    /// Texel index `(row, col)` holding surface coordinate `(u, v)`.
    pub fn texel_index(&self, uv: [T; 2]) -> (usize, usize) {
        let (h, w) = (self.height(), self.width());
        let col = (uv[0] * T::from_usize_lossy(w)).floor().to_usize().unwrap_or(0).min(w - 1);
        let row = (uv[1] * T::from_usize_lossy(h)).floor().to_usize().unwrap_or(0).min(h - 1);
        (row, col)
    }

    /// Nearest-texel lookup.
    pub fn sample(&self, uv: [T; 2]) -> [T; 3] {
        let (r, c) = self.texel_index(uv);
        self.texel(r, c)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        imaging::save_png_rgb(path, &self.texels)
    }

    /// Loads a PNG as a fully valid texture.
    pub fn load_png(path: &Path) -> Result<Self> {
        Self::complete(imaging::load_png_rgb(path)?)
    }
}

/// Per-pixel surface coordinates and silhouette of a rendered view.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceCorrespondence<T> {
    pub height: usize,
    pub width: usize,
    pub surface_coords: Vec<Option<[T; 2]>>,
    pub silhouette: Mask,
}

impl<T: Scalar> SurfaceCorrespondence<T> {
    pub fn new(height: usize, width: usize, surface_coords: Vec<Option<[T; 2]>>, silhouette: Mask) -> Result<Self> {
        if surface_coords.len() != height * width {
            return Err(Error::shape("surface coordinates", &[height * width], &[surface_coords.len()]));
        }
        if silhouette.height() != height || silhouette.width() != width {
            return Err(Error::shape("silhouette", &[height, width], &[silhouette.height(), silhouette.width()]));
        }
        for (i, (c, &s)) in surface_coords.iter().zip(silhouette.data()).enumerate() {
            if c.is_some() && !s {
                return Err(Error::invalid(format!("pixel {i} has a surface coordinate outside the silhouette")));
            }
        }
        Ok(Self {
            height,
            width,
            surface_coords,
            silhouette,
        })
    }

    /// Builds the silhouette from which pixels carry a coordinate.
    pub fn from_coords(height: usize, width: usize, surface_coords: Vec<Option<[T; 2]>>) -> Result<Self> {
        let silhouette = Mask::new(height, width, surface_coords.iter().map(Option::is_some).collect())?;
        Self::new(height, width, surface_coords, silhouette)
    }
}

/// Scatters observed pixel colours into a `tex_size` UV map.
///
/// When several pixels land on one texel, the last in row-major pixel order
/// wins.
pub fn extract_partial_texture<T: Scalar>(
    image: &Tensor<T>,
    corr: &SurfaceCorrespondence<T>,
    tex_size: (usize, usize),
) -> Result<UVTextureMap<T>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::invalid(format!("reference image must be [H, W, 3], got {s:?}")));
    }
    if s[0] != corr.height || s[1] != corr.width {
        return Err(Error::shape("reference image vs correspondence", &[corr.height, corr.width], &s[..2]));
    }
    let (th, tw) = tex_size;
    if th == 0 || tw == 0 {
        return Err(Error::invalid("texture size must be nonzero"));
    }
    let mut out = UVTextureMap {
        texels: Tensor::zeros(&[th, tw, 3]),
        validity: Mask::filled(th, tw, false),
    };
    let mut valid = vec![false; th * tw];
    for (p, (coord, &inside)) in corr.surface_coords.iter().zip(corr.silhouette.data()).enumerate() {
        let Some(uv) = coord.filter(|_| inside) else {
            continue;
        };
        if uv.iter().any(|&c| !(c >= T::zero() && c <= T::one())) {
            return Err(Error::invalid(format!("pixel {p} maps outside the UV square")));
        }
        let (r, c) = out.texel_index(uv);
        let dst = (r * tw + c) * 3;
        out.texels.data_mut()[dst..dst + 3].copy_from_slice(&image.data()[p * 3..p * 3 + 3]);
        valid[r * tw + c] = true;
    }
    out.validity = Mask::new(th, tw, valid)?;
    UVTextureMap::new(out.texels, out.validity)
}

/// Strategy for filling texture holes. Implementations must keep valid
/// texels unchanged and return a fully valid map.
pub trait TextureCompleter<T: Scalar> {
    fn fill(&self, partial: &UVTextureMap<T>) -> Result<UVTextureMap<T>>;
}

/// Copies each hole from its nearest valid texel (Euclidean distance in
/// texel units); ties go to the smaller row, then the smaller column.
#[derive(Debug, Clone, Copy, Default)]
pub struct NearestValid;

impl<T: Scalar> TextureCompleter<T> for NearestValid {
    fn fill(&self, partial: &UVTextureMap<T>) -> Result<UVTextureMap<T>> {
        let (h, w) = (partial.height(), partial.width());
        let valid = partial.validity.data();
        let mut out = partial.texels.clone();
        for row in 0..h {
            for col in 0..w {
                if valid[row * w + col] {
                    continue;
                }
                let (sr, sc) = nearest_valid(valid, h, w, row, col).ok_or(Error::NoTextureEvidence)?;
                let (dst, src) = ((row * w + col) * 3, (sr * w + sc) * 3);
                let t = partial.texels.data();
                let v = [t[src], t[src + 1], t[src + 2]];
                out.data_mut()[dst..dst + 3].copy_from_slice(&v);
            }
        }
        UVTextureMap::complete(out)
    }
}

/// Scans square rings of growing radius. Once ring `r` is done, any
/// unvisited texel is at squared distance at least `(r + 1)^2`.
fn nearest_valid(valid: &[bool], h: usize, w: usize, row: usize, col: usize) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize, usize)> = None;
    let max_r = h.max(w);
    for r in 1..=max_r as isize {
        for dr in -r..=r {
            for dc in -r..=r {
                if dr.abs() != r && dc.abs() != r {
                    continue;
                }
                let (y, x) = (row as isize + dr, col as isize + dc);
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let (y, x) = (y as usize, x as usize);
                if !valid[y * w + x] {
                    continue;
                }
                let cand = ((dr * dr + dc * dc) as usize, y, x);
                if best.is_none_or(|b| cand < b) {
                    best = Some(cand);
                }
            }
        }
        if let Some((d2, _, _)) = best {
            if d2 < ((r + 1) * (r + 1)) as usize {
                break;
            }
        }
    }
    best.map(|(_, y, x)| (y, x))
}

/// Fills every hole of `partial` with `method`.
pub fn complete_texture<T: Scalar>(
    partial: &UVTextureMap<T>,
    method: &dyn TextureCompleter<T>,
) -> Result<UVTextureMap<T>> {
    if partial.validity.count() == 0 {
        return Err(Error::NoTextureEvidence);
    }
    if partial.is_complete() {
        return Ok(partial.clone());
    }
    let out = method.fill(partial)?;
    if !out.is_complete() {
        return Err(Error::invalid("texture completer left holes"));
    }
    let (w, old, new) = (partial.width(), partial.texels.data(), out.texels.data());
    for (i, &v) in partial.validity.data().iter().enumerate() {
        if v && old[i * 3..i * 3 + 3] != new[i * 3..i * 3 + 3] {
            return Err(Error::invalid(format!(
                "texture completer changed valid texel ({}, {})",
                i / w,
                i % w
            )));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_correspondence_copies_pixels() {
        let img = Tensor::<f64>::from_fn(&[4, 4, 3], |i| (i % 11) as f64 / 10.0);
        let coords = (0..16)
            .map(|p| Some([((p % 4) as f64 + 0.5) / 4.0, ((p / 4) as f64 + 0.5) / 4.0]))
            .collect();
        let corr = SurfaceCorrespondence::from_coords(4, 4, coords).unwrap();
        let tex = extract_partial_texture(&img, &corr, (4, 4)).unwrap();
        assert!(tex.is_complete());
        assert_eq!(tex.texels, img);
    }

    #[test]
    fn later_pixels_overwrite_earlier() {
        let img = Tensor::<f64>::from_fn(&[1, 2, 3], |i| if i < 3 { 0.2 } else { 0.9 });
        let corr = SurfaceCorrespondence::from_coords(1, 2, vec![Some([0.1, 0.1]), Some([0.2, 0.2])]).unwrap();
        let tex = extract_partial_texture(&img, &corr, (2, 2)).unwrap();
        assert_eq!(tex.texel(0, 0), [0.9; 3]);
        assert_eq!(tex.validity.count(), 1);
    }

    #[test]
    fn single_texel_spreads_everywhere() {
        let mut t = Tensor::<f64>::zeros(&[5, 6, 3]);
        t.data_mut()[(2 * 6 + 3) * 3..(2 * 6 + 3) * 3 + 3].copy_from_slice(&[0.1, 0.5, 0.7]);
        let m = Mask::from_fn(5, 6, |r, c| r == 2 && c == 3);
        let out = complete_texture(&UVTextureMap::new(t, m).unwrap(), &NearestValid).unwrap();
        for r in 0..5 {
            for c in 0..6 {
                assert_eq!(out.texel(r, c), [0.1, 0.5, 0.7]);
            }
        }
    }

    #[test]
    fn empty_texture_is_rejected() {
        let t = UVTextureMap::new(Tensor::<f64>::zeros(&[2, 2, 3]), Mask::filled(2, 2, false)).unwrap();
        assert!(matches!(complete_texture(&t, &NearestValid), Err(Error::NoTextureEvidence)));
    }
}
