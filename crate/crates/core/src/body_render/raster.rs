//! Z-buffered triangle rasterization of a textured mesh into pose maps.
//!
//! Pixel `(x, y)` is sampled at its centre `(x + 0.5, y + 0.5)`. A pixel is
//! covered when all three normalized edge functions are `>= 0`, so both
//! windings draw and shared edges are covered by both triangles. Depth uses
//! perspective-correct barycentrics and a strict `<` test, so on equal
//! depth the lower triangle index wins. Triangles with any vertex at or
//! behind the near plane are skipped.

use crate::body_render::camera::CameraPose;
use crate::body_render::mesh::BodyMesh;
use crate::body_render::skinning::{pose_mesh, BodyModelState};
use crate::body_render::texture::{SurfaceCorrespondence, UVTextureMap};
use crate::error::{Error, Result};
use crate::imaging::Mask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rendered control image: texture colours where the body is visible and
/// `fill` elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseMap<T> {
    pub pixels: Tensor<T>,
    pub coverage: Mask,
    pub fill: [T; 3],
}

impl<T: Scalar> PoseMap<T> {
    pub fn height(&self) -> usize {
        self.coverage.height()
    }

    pub fn width(&self) -> usize {
        self.coverage.width()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions<T> {
    pub fill: [T; 3],
    /// Camera-space depth at or below which a vertex counts as behind the
    /// camera.
    pub near: T,
}

impl<T: Scalar> Default for RenderOptions<T> {
    fn default() -> Self {
        Self {
            fill: [T::zero(); 3],
            near: T::c(1e-4),
        }
    }
}

pub fn render_pose_map<T: Scalar>(
    mesh: &BodyMesh<T>,
    texture: &UVTextureMap<T>,
    camera: &CameraPose<T>,
    out_size: (usize, usize),
) -> Result<PoseMap<T>> {
    render_with_correspondence(mesh, texture, camera, out_size, &RenderOptions::default()).map(|(m, _)| m)
}

/// Renders and also reports the interpolated surface coordinate of every
/// covered pixel.
pub fn render_with_correspondence<T: Scalar>(
    mesh: &BodyMesh<T>,
    texture: &UVTextureMap<T>,
    camera: &CameraPose<T>,
    out_size: (usize, usize),
    options: &RenderOptions<T>,
) -> Result<(PoseMap<T>, SurfaceCorrespondence<T>)> {
    camera.validate()?;
    if !texture.is_complete() {
        return Err(Error::invalid("pose maps need a fully valid texture"));
    }
    if options.fill.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::invalid("fill colour outside [0, 1]"));
    }
    let (h, w) = out_size;
    if h == 0 || w == 0 {
        return Err(Error::invalid("output size must be nonzero"));
    }
    let nv = mesh.vertices.len();
    if mesh.uv_coords.len() != nv || mesh.triangles.iter().flatten().any(|&i| i >= nv) {
        return Err(Error::invalid("mesh topology is inconsistent"));
    }

    let cam_pts: Vec<[T; 3]> = mesh.vertices.iter().map(|&v| camera.to_camera(v)).collect();
    let mut depth = vec![T::infinity(); h * w];
    let mut coords: Vec<Option<[T; 2]>> = vec![None; h * w];
    let half = T::c(0.5);

    for tri in &mesh.triangles {
        let p = tri.map(|i| cam_pts[i]);
        if p.iter().any(|q| !(q[2] > options.near)) {
            continue;
        }
        let s = p.map(|q| camera.project_camera(q));
        let area = edge(s[0], s[1], s[2]);
        if area == T::zero() || !area.is_finite() {
            continue;
        }
        let lo_x = s.iter().map(|q| q[0]).fold(T::infinity(), T::min);
        let hi_x = s.iter().map(|q| q[0]).fold(T::neg_infinity(), T::max);
        let lo_y = s.iter().map(|q| q[1]).fold(T::infinity(), T::min);
        let hi_y = s.iter().map(|q| q[1]).fold(T::neg_infinity(), T::max);
        let Some((x0, x1)) = pixel_span(lo_x, hi_x, w) else {
            continue;
        };
        let Some((y0, y1)) = pixel_span(lo_y, hi_y, h) else {
            continue;
        };
        let inv_z = p.map(|q| T::one() / q[2]);
        let uv = tri.map(|i| mesh.uv_coords[i]);
        for py in y0..=y1 {
            for px in x0..=x1 {
                let c = [T::from_usize_lossy(px) + half, T::from_usize_lossy(py) + half];
                let b = [
                    edge(s[1], s[2], c) / area,
                    edge(s[2], s[0], c) / area,
                    edge(s[0], s[1], c) / area,
                ];
                if b.iter().any(|&v| v < T::zero()) {
                    continue;
                }
                let wz = [b[0] * inv_z[0], b[1] * inv_z[1], b[2] * inv_z[2]];
                let denom = wz[0] + wz[1] + wz[2];
                let z = T::one() / denom;
                let idx = py * w + px;
                if z < depth[idx] {
                    depth[idx] = z;
                    let pc = wz.map(|v| v / denom);
                    let u = pc[0] * uv[0][0] + pc[1] * uv[1][0] + pc[2] * uv[2][0];
                    let v = pc[0] * uv[0][1] + pc[1] * uv[1][1] + pc[2] * uv[2][1];
                    coords[idx] = Some([clamp01(u), clamp01(v)]);
                }
            }
        }
    }

    let mut pixels = Vec::with_capacity(h * w * 3);
    for c in &coords {
        match c {
            Some(uv) => pixels.extend(texture.sample(*uv)),
            None => pixels.extend(options.fill),
        }
    }
    let corr = SurfaceCorrespondence::from_coords(h, w, coords)?;
    let map = PoseMap {
        pixels: Tensor::new(&[h, w, 3], pixels)?,
        coverage: corr.silhouette.clone(),
        fill: options.fill,
    };
    Ok((map, corr))
}

fn clamp01<T: Scalar>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

/// Twice the signed area of `(a, b, c)`.
fn edge<T: Scalar>(a: [T; 2], b: [T; 2], c: [T; 2]) -> T {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Pixel indices whose centres may fall in `[lo, hi]`, clipped to `[0, n)`.
fn pixel_span<T: Scalar>(lo: T, hi: T, n: usize) -> Option<(usize, usize)> {
    let half = T::c(0.5);
    let first = (lo - half).ceil().max(T::zero());
    let last = (hi - half).floor().min(T::from_usize_lossy(n) - T::one());
    if !(first <= last) {
        return None;
    }
    Some((first.to_usize()?, last.to_usize()?))
}

/// Renders frame `i` as the posed mesh for `states[i]` seen by
/// `trajectory[i]`.
pub fn render_sequence<T: Scalar>(
    mesh: &BodyMesh<T>,
    texture: &UVTextureMap<T>,
    states: &[BodyModelState<T>],
    trajectory: &[CameraPose<T>],
    out_size: (usize, usize),
) -> Result<Vec<PoseMap<T>>> {
    if states.is_empty() {
        return Err(Error::invalid("render_sequence needs at least one frame"));
    }
    if states.len() != trajectory.len() {
        return Err(Error::invalid(format!(
            "{} body states but {} cameras",
            states.len(),
            trajectory.len()
        )));
    }
    states
        .iter()
        .zip(trajectory)
        .map(|(s, c)| render_pose_map(&pose_mesh(mesh, s)?, texture, c, out_size))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_render::camera::Intrinsics;
    use crate::body_render::mesh::Skeleton;

    fn quads(depths: &[f64]) -> BodyMesh<f64> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for &z in depths {
            let b = vertices.len();
            vertices.extend([[-1.0, -1.0, z], [1.0, -1.0, z], [1.0, 1.0, z], [-1.0, 1.0, z]]);
            triangles.push([b, b + 1, b + 2]);
            triangles.push([b, b + 2, b + 3]);
        }
        let n = vertices.len();
        let uv = |i: usize| [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]][i % 4];
        BodyMesh {
            vertices,
            triangles,
            uv_coords: (0..n).map(|i| {
                let mut c = uv(i);
                // Second quad samples the right half of the texture.
                if i >= 4 {
                    c[0] = 0.5 + c[0] * 0.5;
                } else {
                    c[0] *= 0.5;
                }
                c
            }).collect(),
            joint_weights: vec![1.0; n],
            skeleton: Skeleton {
                parents: vec![None],
                pivots: vec![[0.0; 3]],
            },
        }
    }

    fn two_tone() -> UVTextureMap<f64> {
        UVTextureMap::complete(Tensor::from_fn(&[2, 2, 3], |i| if (i / 3) % 2 == 0 { 0.2 } else { 0.8 })).unwrap()
    }

    fn ident_cam() -> CameraPose<f64> {
        CameraPose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            intrinsics: Intrinsics::centered(8.0, 16, 16),
        }
    }

    #[test]
    fn nearer_surface_wins_in_either_order() {
        for depths in [[1.0, 2.0], [2.0, 1.0]] {
            let m = render_pose_map(&quads(&depths), &two_tone(), &ident_cam(), (16, 16)).unwrap();
            let near_left = depths[0] < depths[1];
            let want = if near_left { 0.2 } else { 0.8 };
            assert_eq!(m.pixels.data()[(8 * 16 + 8) * 3], want);
        }
    }

    #[test]
    fn mesh_behind_camera_is_empty() {
        let m = render_pose_map(&quads(&[-1.0]), &two_tone(), &ident_cam(), (16, 16)).unwrap();
        assert_eq!(m.coverage.count(), 0);
        assert!(m.pixels.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_focal_is_rejected() {
        let mut cam = ident_cam();
        cam.intrinsics.fx = 0.0;
        assert!(render_pose_map(&quads(&[1.0]), &two_tone(), &cam, (16, 16)).is_err());
    }
}
