//! Joint rotations and linear blend skinning.
//!
//! Each joint rotates its subtree about its rest-pose pivot. Global
//! transforms compose parent-first: `G_j = G_parent(j) ∘ L_j` with
//! `L_j(x) = R_j (x - p_j) + p_j`.

use serde::{Deserialize, Serialize};

use crate::body_render::mesh::BodyMesh;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Mat3<T> = [[T; 3]; 3];

/// Body pose for one frame: one axis-angle vector per joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyModelState<T> {
    pub theta: Vec<[T; 3]>,
    pub frame_index: usize,
}

impl<T: Scalar> BodyModelState<T> {
    pub fn rest(joints: usize, frame_index: usize) -> Self {
        Self {
            theta: vec![[T::zero(); 3]; joints],
            frame_index,
        }
    }

    /// Builds a state with every rotation reduced to the principal range.
    pub fn new(theta: Vec<[T; 3]>, frame_index: usize) -> Result<Self> {
        let theta = theta
            .into_iter()
            .map(normalize_axis_angle)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { theta, frame_index })
    }

    pub fn validate(&self, joints: usize) -> Result<()> {
        if self.theta.len() != joints {
            return Err(Error::invalid(format!(
                "state has {} joint rotations, mesh has {joints} joints",
                self.theta.len()
            )));
        }
        for r in &self.theta {
            if r.iter().any(|c| !c.is_finite()) {
                return Err(Error::invalid("non-finite joint rotation"));
            }
            if norm(*r) > T::PI() + T::c(1e-9) {
                return Err(Error::invalid("joint rotation outside the principal range"));
            }
        }
        Ok(())
    }
}

fn norm<T: Scalar>(v: [T; 3]) -> T {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Rewrites an axis-angle vector so its angle lies in `[0, π]`, describing
/// the same rotation.
pub fn normalize_axis_angle<T: Scalar>(r: [T; 3]) -> Result<[T; 3]> {
    if r.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("non-finite joint rotation"));
    }
    let a = norm(r);
    if a <= T::PI() {
        return Ok(r);
    }
    let tau = T::PI() + T::PI();
    let mut w = a % tau;
    if w > T::PI() {
        w -= tau;
    }
    let s = w / a;
    Ok([r[0] * s, r[1] * s, r[2] * s])
}

/// Rodrigues' formula; exactly the identity for a zero vector.
pub fn rodrigues<T: Scalar>(r: [T; 3]) -> Mat3<T> {
    let a = norm(r);
    let (o, l) = (T::zero(), T::one());
    if a == o {
        return [[l, o, o], [o, l, o], [o, o, l]];
    }
    let k = [r[0] / a, r[1] / a, r[2] / a];
    let (s, c) = a.sin_cos();
    let v = l - c;
    [
        [c + k[0] * k[0] * v, k[0] * k[1] * v - k[2] * s, k[0] * k[2] * v + k[1] * s],
        [k[1] * k[0] * v + k[2] * s, c + k[1] * k[1] * v, k[1] * k[2] * v - k[0] * s],
        [k[2] * k[0] * v - k[1] * s, k[2] * k[1] * v + k[0] * s, c + k[2] * k[2] * v],
    ]
}

pub fn mat_vec<T: Scalar>(m: &Mat3<T>, v: [T; 3]) -> [T; 3] {
    std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

pub fn mat_mul<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    std::array::from_fn(|i| std::array::from_fn(|j| a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j]))
}

/// Rigid transform `x -> r x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rigid<T> {
    pub r: Mat3<T>,
    pub t: [T; 3],
}

impl<T: Scalar> Rigid<T> {
    pub fn apply(&self, x: [T; 3]) -> [T; 3] {
        let y = mat_vec(&self.r, x);
        [y[0] + self.t[0], y[1] + self.t[1], y[2] + self.t[2]]
    }

    /// `self ∘ other`.
    pub fn then_inner(&self, other: &Rigid<T>) -> Rigid<T> {
        let t = self.apply(other.t);
        Rigid {
            r: mat_mul(&self.r, &other.r),
            t,
        }
    }
}

/// World-space transform of every joint for `state`.
pub fn joint_transforms<T: Scalar>(mesh: &BodyMesh<T>, state: &BodyModelState<T>) -> Result<Vec<Rigid<T>>> {
    state.validate(mesh.joint_count())?;
    let sk = &mesh.skeleton;
    let mut out: Vec<Rigid<T>> = Vec::with_capacity(sk.joint_count());
    for j in 0..sk.joint_count() {
        let r = rodrigues(state.theta[j]);
        let p = sk.pivots[j];
        let rp = mat_vec(&r, p);
        let local = Rigid {
            r,
            t: [p[0] - rp[0], p[1] - rp[1], p[2] - rp[2]],
        };
        let g = match sk.parents[j] {
            Some(parent) => out[parent].then_inner(&local),
            None => local,
        };
        out.push(g);
    }
    Ok(out)
}

/// Linear blend skinning. Topology, UVs and weights are carried over.
pub fn pose_mesh<T: Scalar>(mesh: &BodyMesh<T>, state: &BodyModelState<T>) -> Result<BodyMesh<T>> {
    let g = joint_transforms(mesh, state)?;
    let nj = mesh.joint_count();
    let vertices = mesh
        .vertices
        .iter()
        .enumerate()
        .map(|(vi, &v)| {
            let mut acc = [T::zero(); 3];
            for (j, gj) in g.iter().enumerate() {
                let w = mesh.joint_weights[vi * nj + j];
                if w != T::zero() {
                    let p = gj.apply(v);
                    for a in 0..3 {
                        acc[a] += w * p[a];
                    }
                }
            }
            acc
        })
        .collect();
    Ok(BodyMesh {
        vertices,
        ..mesh.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_render::mesh::Skeleton;

    #[test]
    fn rodrigues_quarter_turn_about_z() {
        let r = rodrigues([0.0, 0.0, std::f64::consts::FRAC_PI_2]);
        let v = mat_vec(&r, [1.0, 0.0, 0.0]);
        assert!((v[0]).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12 && v[2].abs() < 1e-12);
    }

    #[test]
    fn normalization_keeps_the_rotation() {
        let r = [0.3, -2.0, 4.1];
        let n = normalize_axis_angle(r).unwrap();
        assert!(norm(n) <= std::f64::consts::PI);
        let (a, b) = (rodrigues(r), rodrigues(n));
        for i in 0..3 {
            for j in 0..3 {
                assert!((a[i][j] - b[i][j]).abs() < 1e-12);
            }
        }
        assert!(normalize_axis_angle([f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn child_follows_parent() {
        let mesh = BodyMesh {
            vertices: vec![[2.0, 0.0, 0.0]],
            triangles: vec![],
            uv_coords: vec![[0.0, 0.0]],
            joint_weights: vec![0.0, 1.0],
            skeleton: Skeleton {
                parents: vec![None, Some(0)],
                pivots: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
            },
        };
        let half = std::f64::consts::FRAC_PI_2;
        let state = BodyModelState::new(vec![[0.0, 0.0, half], [0.0, 0.0, half]], 0).unwrap();
        let posed = pose_mesh(&mesh, &state).unwrap();
        // Child bends the tip up to (1,1,0); root then turns it to (-1,1,0).
        let v = posed.vertices[0];
        assert!((v[0] + 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12, "{v:?}");
    }
}
