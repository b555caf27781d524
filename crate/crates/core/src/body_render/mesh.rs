//! Skinned body mesh, its skeleton, a procedural low-poly humanoid, and the
//! plain-text mesh format.
//!
//! Text format, one record per line, `#` starts a comment:
//!
//! ```text
//! j <parent|-1> <px> <py> <pz>     joint pivot in rest pose
//! v <x> <y> <z>                    vertex position
//! vt <u> <v>                       per-vertex UV, one per `v`
//! w <j> <weight> [<j> <weight>...] per-vertex skinning weights, one per `v`
//! f <a> <b> <c>                    triangle, 0-based vertex indices
//! ```

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton<T> {
    /// Parent joint index; parents precede children.
    pub parents: Vec<Option<usize>>,
    /// Rest-pose rotation centre of each joint.
    pub pivots: Vec<[T; 3]>,
}

impl<T: Scalar> Skeleton<T> {
    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyMesh<T> {
    pub vertices: Vec<[T; 3]>,
    pub triangles: Vec<[usize; 3]>,
    pub uv_coords: Vec<[T; 2]>,
    /// Dense `V x J` skinning weights, row-major.
    pub joint_weights: Vec<T>,
    pub skeleton: Skeleton<T>,
}

impl<T: Scalar> BodyMesh<T> {
    pub fn joint_count(&self) -> usize {
        self.skeleton.joint_count()
    }

    pub fn weight(&self, vertex: usize, joint: usize) -> T {
        self.joint_weights[vertex * self.joint_count() + joint]
    }

    pub fn validate(&self) -> Result<()> {
        let nv = self.vertices.len();
        let nj = self.joint_count();
        if nj == 0 {
            return Err(Error::invalid("mesh has no joints"));
        }
        if self.skeleton.pivots.len() != nj {
            return Err(Error::invalid("joint pivots and parents differ in length"));
        }
        for (j, p) in self.skeleton.parents.iter().enumerate() {
            if let Some(p) = p {
                if *p >= j {
                    return Err(Error::invalid(format!("joint {j} parent {p} does not precede it")));
                }
            }
        }
        if self.uv_coords.len() != nv {
            return Err(Error::invalid("uv count differs from vertex count"));
        }
        if self.joint_weights.len() != nv * nj {
            return Err(Error::invalid("weight matrix is not V x J"));
        }
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&k| k >= nv) {
                return Err(Error::invalid(format!("triangle {i} references a missing vertex")));
            }
        }
        for (i, uv) in self.uv_coords.iter().enumerate() {
            let ok = uv.iter().all(|&c| c >= T::zero() && c <= T::one());
            if !ok {
                return Err(Error::invalid(format!("vertex {i} uv outside [0,1]^2")));
            }
        }
        for v in 0..nv {
            let row = &self.joint_weights[v * nj..(v + 1) * nj];
            if row.iter().any(|&w| w < T::zero() || !w.is_finite()) {
                return Err(Error::invalid(format!("vertex {v} has a negative skinning weight")));
            }
            let s: T = row.iter().copied().sum();
            if (s - T::one()).abs() > T::c(1e-6) {
                return Err(Error::invalid(format!("vertex {v} weights sum to {s}")));
            }
        }
        if self.vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite vertex position"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# cfsynth mesh v1\n");
        for (p, c) in self.skeleton.parents.iter().zip(&self.skeleton.pivots) {
            let p = p.map_or(-1, |p| p as i64);
            let _ = writeln!(s, "j {p} {} {} {}", c[0], c[1], c[2]);
        }
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for uv in &self.uv_coords {
            let _ = writeln!(s, "vt {} {}", uv[0], uv[1]);
        }
        let nj = self.joint_count();
        for v in 0..self.vertices.len() {
            s.push('w');
            for j in 0..nj {
                let w = self.weight(v, j);
                if w != T::zero() {
                    let _ = write!(s, " {j} {w}");
                }
            }
            s.push('\n');
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0], t[1], t[2]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, why: &str| Error::format("mesh", format!("line {}: {why}", line + 1));
        let mut parents = Vec::new();
        let mut pivots = Vec::new();
        let mut vertices = Vec::new();
        let mut uvs = Vec::new();
        let mut weights: Vec<Vec<(usize, T)>> = Vec::new();
        let mut triangles = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let tag = it.next().unwrap();
            let rest: Vec<&str> = it.collect();
            let num = |s: &str| s.parse::<f64>().map(T::c).map_err(|_| bad(ln, "bad number"));
            let idx = |s: &str| s.parse::<usize>().map_err(|_| bad(ln, "bad index"));
            match tag {
                "j" => {
                    if rest.len() != 4 {
                        return Err(bad(ln, "joint needs parent and pivot"));
                    }
                    let p: i64 = rest[0].parse().map_err(|_| bad(ln, "bad parent"))?;
                    parents.push(if p < 0 { None } else { Some(p as usize) });
                    pivots.push([num(rest[1])?, num(rest[2])?, num(rest[3])?]);
                }
                "v" => {
                    if rest.len() != 3 {
                        return Err(bad(ln, "vertex needs 3 coordinates"));
                    }
                    vertices.push([num(rest[0])?, num(rest[1])?, num(rest[2])?]);
                }
                "vt" => {
                    if rest.len() != 2 {
                        return Err(bad(ln, "uv needs 2 coordinates"));
                    }
                    uvs.push([num(rest[0])?, num(rest[1])?]);
                }
                "w" => {
                    if rest.is_empty() || rest.len() % 2 != 0 {
                        return Err(bad(ln, "weights come in joint/value pairs"));
                    }
                    let mut row = Vec::new();
                    for pair in rest.chunks(2) {
                        row.push((idx(pair[0])?, num(pair[1])?));
                    }
                    weights.push(row);
                }
                "f" => {
                    if rest.len() != 3 {
                        return Err(bad(ln, "face needs 3 indices"));
                    }
                    triangles.push([idx(rest[0])?, idx(rest[1])?, idx(rest[2])?]);
                }
                other => return Err(bad(ln, &format!("unknown record '{other}'"))),
            }
        }
        let nj = parents.len();
        if weights.len() != vertices.len() {
            return Err(Error::format("mesh", "weight rows differ from vertex count"));
        }
        let mut dense = vec![T::zero(); vertices.len() * nj];
        for (v, row) in weights.iter().enumerate() {
            for &(j, w) in row {
                if j >= nj {
                    return Err(Error::format("mesh", format!("vertex {v} weights unknown joint {j}")));
                }
                dense[v * nj + j] += w;
            }
        }
        let mesh = BodyMesh {
            vertices,
            triangles,
            uv_coords: uvs,
            joint_weights: dense,
            skeleton: Skeleton { parents, pivots },
        };
        mesh.validate()?;
        Ok(mesh)
    }
}

/// Joints of the procedural humanoid.
pub mod joints {
    pub const ROOT: usize = 0;
    pub const NECK: usize = 1;
    pub const L_SHOULDER: usize = 2;
    pub const L_ELBOW: usize = 3;
    pub const R_SHOULDER: usize = 4;
    pub const R_ELBOW: usize = 5;
    pub const L_HIP: usize = 6;
    pub const R_HIP: usize = 7;
    pub const COUNT: usize = 8;
}

/// Number of box parts (and atlas columns) in [`humanoid`].
pub const HUMANOID_PARTS: usize = 8;
/// Faces per part (atlas rows).
pub const HUMANOID_FACES: usize = 6;

struct PartSpec {
    joint: usize,
    center: [f64; 3],
    half: [f64; 3],
    /// Axis (0..3) and sign pointing from the part towards its parent
    /// joint; vertices on that end blend with the parent.
    proximal: Option<(usize, f64)>,
}

/// Low-poly articulated humanoid, about two units tall, standing on `y = -1`
/// and facing `+z`.
///
/// Eight boxes, one per joint, 192 vertices. Each box face owns a
/// rectangle of an 8 x 6 UV atlas (column = part, row = face) inset by half
/// a texel of a `texture_size` texture so nearest-texel lookups never
/// cross into a neighbouring face.
pub fn humanoid<T: Scalar>(texture_size: (usize, usize)) -> BodyMesh<T> {
    use joints::*;
    let pivots = [
        [0.0, -0.05, 0.0],
        [0.0, 0.5, 0.0],
        [0.3, 0.45, 0.0],
        [0.62, 0.45, 0.0],
        [-0.3, 0.45, 0.0],
        [-0.62, 0.45, 0.0],
        [0.13, -0.05, 0.0],
        [-0.13, -0.05, 0.0],
    ];
    let parents = [None, Some(ROOT), Some(ROOT), Some(L_SHOULDER), Some(ROOT), Some(R_SHOULDER), Some(ROOT), Some(ROOT)];
    let parts = [
        PartSpec { joint: ROOT, center: [0.0, 0.2, 0.0], half: [0.26, 0.3, 0.13], proximal: None },
        PartSpec { joint: NECK, center: [0.0, 0.7, 0.0], half: [0.14, 0.17, 0.14], proximal: Some((1, -1.0)) },
        PartSpec { joint: L_SHOULDER, center: [0.46, 0.45, 0.0], half: [0.16, 0.07, 0.07], proximal: Some((0, -1.0)) },
        PartSpec { joint: L_ELBOW, center: [0.78, 0.45, 0.0], half: [0.16, 0.06, 0.06], proximal: Some((0, -1.0)) },
        PartSpec { joint: R_SHOULDER, center: [-0.46, 0.45, 0.0], half: [0.16, 0.07, 0.07], proximal: Some((0, 1.0)) },
        PartSpec { joint: R_ELBOW, center: [-0.78, 0.45, 0.0], half: [0.16, 0.06, 0.06], proximal: Some((0, 1.0)) },
        PartSpec { joint: L_HIP, center: [0.13, -0.52, 0.0], half: [0.1, 0.47, 0.1], proximal: Some((1, 1.0)) },
        PartSpec { joint: R_HIP, center: [-0.13, -0.52, 0.0], half: [0.1, 0.47, 0.1], proximal: Some((1, 1.0)) },
    ];
    // Face corner sign patterns (x, y, z) in counter-clockwise order seen
    // from outside, paired with atlas corner (u, v) offsets.
    const FACES: [[[f64; 3]; 4]; 6] = [
        [[-1., -1., 1.], [1., -1., 1.], [1., 1., 1.], [-1., 1., 1.]],
        [[1., -1., -1.], [-1., -1., -1.], [-1., 1., -1.], [1., 1., -1.]],
        [[1., -1., 1.], [1., -1., -1.], [1., 1., -1.], [1., 1., 1.]],
        [[-1., -1., -1.], [-1., -1., 1.], [-1., 1., 1.], [-1., 1., -1.]],
        [[-1., 1., 1.], [1., 1., 1.], [1., 1., -1.], [-1., 1., -1.]],
        [[-1., -1., -1.], [1., -1., -1.], [1., -1., 1.], [-1., -1., 1.]],
    ];
    const CORNER_UV: [[f64; 2]; 4] = [[0.0, 1.0], [1.0, 1.0], [1.0, 0.0], [0.0, 0.0]];
    let (th, tw) = (texture_size.0 as f64, texture_size.1 as f64);
    let nj = COUNT;
    let mut vertices = Vec::new();
    let mut uvs = Vec::new();
    let mut weights = Vec::new();
    let mut triangles = Vec::new();
    for (pi, part) in parts.iter().enumerate() {
        for (fi, face) in FACES.iter().enumerate() {
            let u0 = pi as f64 / HUMANOID_PARTS as f64 + 0.5 / tw;
            let u1 = (pi + 1) as f64 / HUMANOID_PARTS as f64 - 0.5 / tw;
            let v0 = fi as f64 / HUMANOID_FACES as f64 + 0.5 / th;
            let v1 = (fi + 1) as f64 / HUMANOID_FACES as f64 - 0.5 / th;
            let base = vertices.len();
            for (corner, cuv) in face.iter().zip(CORNER_UV) {
                let p: [f64; 3] = std::array::from_fn(|a| part.center[a] + corner[a] * part.half[a]);
                vertices.push(p.map(T::c));
                uvs.push([T::c(u0 + cuv[0] * (u1 - u0)), T::c(v0 + cuv[1] * (v1 - v0))]);
                let mut row = vec![T::zero(); nj];
                match (part.proximal, parents[part.joint]) {
                    (Some((axis, sign)), Some(parent)) if corner[axis] == sign => {
                        row[part.joint] = T::c(0.75);
                        row[parent] = T::c(0.25);
                    }
                    _ => row[part.joint] = T::one(),
                }
                weights.extend(row);
            }
            triangles.push([base, base + 1, base + 2]);
            triangles.push([base, base + 2, base + 3]);
        }
    }
    BodyMesh {
        vertices,
        triangles,
        uv_coords: uvs,
        joint_weights: weights,
        skeleton: Skeleton {
            parents: parents.to_vec(),
            pivots: pivots.iter().map(|p| p.map(T::c)).collect(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn humanoid_is_valid() {
        let m = humanoid::<f64>((48, 64));
        m.validate().unwrap();
        assert_eq!(m.vertices.len(), 192);
        assert_eq!(m.triangles.len(), 96);
        assert_eq!(m.joint_count(), 8);
    }

    #[test]
    fn text_round_trip() {
        let m = humanoid::<f64>((48, 64));
        let back = BodyMesh::<f64>::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn loader_rejects_bad_indices_and_weights() {
        let text = "j -1 0 0 0\nv 0 0 0\nvt 0 0\nw 0 1\nf 0 0 1\n";
        assert!(BodyMesh::<f64>::from_text(text).is_err());
        let text = "j -1 0 0 0\nv 0 0 0\nvt 0 0\nw 0 0.5\nf 0 0 0\n";
        assert!(BodyMesh::<f64>::from_text(text).is_err());
        let text = "j -1 0 0 0\nv 0 0 0\nvt 1.5 0\nw 0 1\nf 0 0 0\n";
        assert!(BodyMesh::<f64>::from_text(text).is_err());
    }
}
