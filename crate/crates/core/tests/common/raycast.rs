//! Brute-force reference renderer: one ray per pixel centre, intersected
//! with every triangle in camera space.

use cfsynth::body_render::{BodyMesh, CameraPose, UVTextureMap};

pub struct RayHit {
    pub depth: f64,
    pub uv: [f64; 2],
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Möller-Trumbore intersection of a ray from the origin. Returns the ray
/// parameter and the barycentric weights of vertices 1 and 2.
fn intersect(dir: [f64; 3], v: [[f64; 3]; 3]) -> Option<(f64, f64, f64)> {
    let e1 = sub(v[1], v[0]);
    let e2 = sub(v[2], v[0]);
    let p = cross(dir, e2);
    let det = dot(e1, p);
    if det.abs() < 1e-14 {
        return None;
    }
    let s = [-v[0][0], -v[0][1], -v[0][2]];
    let b1 = dot(s, p) / det;
    let q = cross(s, e1);
    let b2 = dot(dir, q) / det;
    let t = dot(e2, q) / det;
    let eps = 1e-12;
    (b1 >= -eps && b2 >= -eps && b1 + b2 <= 1.0 + eps && t > 0.0).then_some((t, b1, b2))
}

/// Nearest hit through the centre of pixel `(x, y)`; earlier triangles win
/// exact depth ties.
pub fn cast(mesh: &BodyMesh<f64>, cam: &CameraPose<f64>, x: usize, y: usize, near: f64) -> Option<RayHit> {
    let k = &cam.intrinsics;
    let dir = [(x as f64 + 0.5 - k.cx) / k.fx, (y as f64 + 0.5 - k.cy) / k.fy, 1.0];
    let verts: Vec<[f64; 3]> = mesh.vertices.iter().map(|&p| cam.to_camera(p)).collect();
    let mut best: Option<RayHit> = None;
    for tri in &mesh.triangles {
        let v = [verts[tri[0]], verts[tri[1]], verts[tri[2]]];
        if v.iter().any(|p| p[2] <= near) {
            continue;
        }
        if let Some((t, b1, b2)) = intersect(dir, v) {
            // dir has unit z, so the ray parameter is the camera depth.
            if best.as_ref().is_none_or(|b| t < b.depth) {
                let b0 = 1.0 - b1 - b2;
                let uv = [0, 1].map(|c| {
                    b0 * mesh.uv_coords[tri[0]][c] + b1 * mesh.uv_coords[tri[1]][c] + b2 * mesh.uv_coords[tri[2]][c]
                });
                best = Some(RayHit { depth: t, uv });
            }
        }
    }
    best
}

/// Texel colour by nearest-texel lookup, computed independently of the
/// library's sampler.
pub fn texel_at(tex: &UVTextureMap<f64>, uv: [f64; 2]) -> [f64; 3] {
    let (h, w) = (tex.height(), tex.width());
    let col = ((uv[0] * w as f64).floor().max(0.0) as usize).min(w - 1);
    let row = ((uv[1] * h as f64).floor().max(0.0) as usize).min(h - 1);
    let d = tex.texels.data();
    let i = (row * w + col) * 3;
    [d[i], d[i + 1], d[i + 2]]
}

/// Coverage and colours of the whole image.
pub fn render(
    mesh: &BodyMesh<f64>,
    tex: &UVTextureMap<f64>,
    cam: &CameraPose<f64>,
    size: (usize, usize),
) -> (Vec<bool>, Vec<[f64; 3]>) {
    let mut cov = Vec::with_capacity(size.0 * size.1);
    let mut col = Vec::with_capacity(size.0 * size.1);
    for y in 0..size.0 {
        for x in 0..size.1 {
            match cast(mesh, cam, x, y, 1e-4) {
                Some(h) => {
                    cov.push(true);
                    col.push(texel_at(tex, h.uv));
                }
                None => {
                    cov.push(false);
                    col.push([0.0; 3]);
                }
            }
        }
    }
    (cov, col)
}
