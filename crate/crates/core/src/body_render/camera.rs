//! Pinhole cameras and trajectory files.
//!
//! Camera space has x right, y down, z forward. A world point `x` maps to
//! `R x + t` in camera space and then to pixel `(fx X/Z + cx, fy Y/Z + cy)`.
//!
//! Trajectory files hold one camera per line: 9 rotation entries
//! (row-major), 3 translation entries, then `fx fy cx cy`. Blank lines and
//! `#` comments are ignored.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::body_render::skinning::{mat_vec, Mat3};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Scalar> Intrinsics<T> {
    /// Square-pixel intrinsics centred on an `h x w` image.
    pub fn centered(focal: T, h: usize, w: usize) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: T::from_usize_lossy(w) / T::c(2.0),
            cy: T::from_usize_lossy(h) / T::c(2.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose<T> {
    pub rotation: Mat3<T>,
    pub translation: [T; 3],
    pub intrinsics: Intrinsics<T>,
}

fn sub<T: Scalar>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross<T: Scalar>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalized<T: Scalar>(a: [T; 3]) -> Result<[T; 3]> {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    if !(n > T::zero()) || !n.is_finite() {
        return Err(Error::invalid("degenerate camera direction"));
    }
    Ok([a[0] / n, a[1] / n, a[2] / n])
}

impl<T: Scalar> CameraPose<T> {
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let flat = r.iter().flatten().chain(&self.translation);
        let k = &self.intrinsics;
        if flat.chain([&k.fx, &k.fy, &k.cx, &k.cy]).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite camera parameter"));
        }
        if !(k.fx > T::zero() && k.fy > T::zero()) {
            return Err(Error::invalid("camera focal lengths must be positive"));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot = (0..3).map(|a| r[i][a] * r[j][a]).sum::<T>();
                let want = if i == j { T::one() } else { T::zero() };
                if (dot - want).abs() > T::c(1e-6) {
                    return Err(Error::invalid("camera rotation is not orthonormal"));
                }
            }
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with `up` pointing towards the
    /// top of the image.
    pub fn look_at(eye: [T; 3], target: [T; 3], up: [T; 3], intrinsics: Intrinsics<T>) -> Result<Self> {
        let forward = normalized(sub(target, eye))?;
        let right = normalized(cross(forward, up))?;
        let down = cross(forward, right);
        let rotation = [right, down, forward];
        let re = mat_vec(&rotation, eye);
        Ok(Self {
            rotation,
            translation: [-re[0], -re[1], -re[2]],
            intrinsics,
        })
    }

    /// Camera on a horizontal circle around `target`. `turns` is measured in
    /// full revolutions from the `+z` side; only its fractional part is
    /// used, so whole turns give bit-identical cameras.
    pub fn orbit(target: [T; 3], radius: T, height: T, turns: T, intrinsics: Intrinsics<T>) -> Result<Self> {
        let frac = turns - turns.floor();
        let angle = frac * T::c(2.0) * T::PI();
        let (s, c) = angle.sin_cos();
        let eye = [target[0] + radius * s, target[1] + height, target[2] + radius * c];
        Self::look_at(eye, target, [T::zero(), T::one(), T::zero()], intrinsics)
    }

    pub fn to_camera(&self, x: [T; 3]) -> [T; 3] {
        let y = mat_vec(&self.rotation, x);
        [y[0] + self.translation[0], y[1] + self.translation[1], y[2] + self.translation[2]]
    }

    /// Pixel coordinates of a camera-space point with `z > 0`.
    pub fn project_camera(&self, p: [T; 3]) -> [T; 2] {
        let k = &self.intrinsics;
        [k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy]
    }

    /// Unnormalized camera-space ray direction through pixel position `(x, y)`.
    pub fn ray_direction(&self, x: T, y: T) -> [T; 3] {
        let k = &self.intrinsics;
        [(x - k.cx) / k.fx, (y - k.cy) / k.fy, T::one()]
    }
}

pub fn trajectory_to_text<T: Scalar>(cams: &[CameraPose<T>]) -> String {
    let mut s = String::from("# r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz fx fy cx cy\n");
    for c in cams {
        let k = &c.intrinsics;
        let nums = c
            .rotation
            .iter()
            .flatten()
            .chain(&c.translation)
            .chain([&k.fx, &k.fy, &k.cx, &k.cy]);
        let line: Vec<String> = nums.map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

pub fn trajectory_from_text<T: Scalar>(text: &str) -> Result<Vec<CameraPose<T>>> {
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let nums = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map(T::c))
            .collect::<Result<Vec<T>, _>>()
            .map_err(|_| Error::format("trajectory", format!("line {}: bad number", ln + 1)))?;
        if nums.len() != 16 {
            return Err(Error::format(
                "trajectory",
                format!("line {}: expected 16 numbers, got {}", ln + 1, nums.len()),
            ));
        }
        let cam = CameraPose {
            rotation: [
                [nums[0], nums[1], nums[2]],
                [nums[3], nums[4], nums[5]],
                [nums[6], nums[7], nums[8]],
            ],
            translation: [nums[9], nums[10], nums[11]],
            intrinsics: Intrinsics {
                fx: nums[12],
                fy: nums[13],
                cx: nums[14],
                cy: nums[15],
            },
        };
        cam.validate()
            .map_err(|e| Error::format("trajectory", format!("line {}: {e}", ln + 1)))?;
        out.push(cam);
    }
    if out.is_empty() {
        return Err(Error::format("trajectory", "no camera records"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_puts_target_on_axis() {
        let k = Intrinsics::<f64>::centered(90.0, 64, 64);
        let cam = CameraPose::look_at([1.0, 2.0, 4.0], [0.0, 0.5, 0.0], [0.0, 1.0, 0.0], k).unwrap();
        cam.validate().unwrap();
        let p = cam.to_camera([0.0, 0.5, 0.0]);
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12 && p[2] > 0.0);
        // World up projects above the centre (smaller row).
        let up = cam.project_camera(cam.to_camera([0.0, 1.0, 0.0]));
        assert!(up[1] < 32.0);
    }

    #[test]
    fn whole_turns_repeat_exactly() {
        let k = Intrinsics::centered(90.0, 64, 64);
        let a = CameraPose::orbit([0.0; 3], 3.0, 0.5, 0.25, k).unwrap();
        let b = CameraPose::orbit([0.0; 3], 3.0, 0.5, 2.25, k).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trajectory_round_trip_and_rejection() {
        let k = Intrinsics::centered(90.0, 64, 64);
        let cams: Vec<CameraPose<f64>> =
            (0..3).map(|i| CameraPose::orbit([0.0; 3], 3.0, 0.2, i as f64 / 7.0, k).unwrap()).collect();
        let back: Vec<CameraPose<f64>> = trajectory_from_text(&trajectory_to_text(&cams)).unwrap();
        assert_eq!(back, cams);
        assert!(trajectory_from_text::<f64>("1 0 0 0 1 0 0 0 1 0 0 0 0 90 32 32\n").is_err());
        assert!(trajectory_from_text::<f64>("1 0 0 0 2 0 0 0 1 0 0 0 90 90 32 32\n").is_err());
    }
}
