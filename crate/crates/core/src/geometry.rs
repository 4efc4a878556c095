//! Camera model, pose algebra, ray casting and stratified sampling.
//!
//! Conventions: a [`Pose`] is world-from-camera. The camera looks along +z,
//! with x to the right and y down; pixel `(i, j)` is column `i`, row `j`, and
//! its ray passes through the pixel center `(i + 0.5, j + 0.5)`.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Rigid world-from-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub q: UnitQuaternion<f64>,
    pub t: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            q: UnitQuaternion::identity(),
            t: Vec3::zeros(),
        }
    }

    /// Builds a pose from a scalar-first quaternion, normalizing it.
    pub fn from_wxyz(q: [f64; 4], t: [f64; 3]) -> Result<Self> {
        let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = raw.norm();
        if !norm.is_finite() || norm < 1e-12 || t.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "pose must be finite with non-zero quaternion, got q={q:?} t={t:?}"
            )));
        }
        Ok(Pose {
            q: UnitQuaternion::new_normalize(raw),
            t: Vec3::from(t),
        })
    }

    pub fn new(q: UnitQuaternion<f64>, t: Vec3) -> Self {
        Pose { q, t }
    }

    /// Scalar-first quaternion components.
    pub fn wxyz(&self) -> [f64; 4] {
        let c = self.q.quaternion();
        [c.w, c.i, c.j, c.k]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.t.x, self.t.y, self.t.z]
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.q.to_rotation_matrix().into_inner()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut q = self.q * other.q;
        q.renormalize();
        Pose {
            q,
            t: self.q * other.t + self.t,
        }
    }

    pub fn inverse(&self) -> Pose {
        let q = self.q.inverse();
        Pose { q, t: -(q * self.t) }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.q * p + self.t
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.t
    }

    /// Camera placed at `eye`, looking at `target`, with image "up" closest to `up`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Pose {
        let z = (target - eye).normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vec3::x());
        }
        // Right-handed: x right, y down (away from `up`), z forward.
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_columns(&[x, y, z]);
        let rot = nalgebra::Rotation3::from_matrix_unchecked(r);
        Pose {
            q: UnitQuaternion::from_rotation_matrix(&rot),
            t: eye,
        }
    }

    /// Angle in radians of the relative rotation between two poses.
    pub fn rotation_error(&self, other: &Pose) -> f64 {
        self.q.angle_to(&other.q)
    }

    pub fn translation_error(&self, other: &Pose) -> f64 {
        (self.t - other.t).norm()
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Principal point at the image center and equal focal lengths.
    pub fn centered(focal: f64, width: u32, height: u32) -> Self {
        CameraIntrinsics {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Rescales to a new resolution, keeping the field of view.
    pub fn scaled_to(&self, width: u32, height: u32) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        CameraIntrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }

    /// Unnormalized camera-frame direction through the center of pixel `(i, j)`.
    pub fn pixel_direction(&self, i: u32, j: u32) -> Vec3 {
        Vec3::new(
            (i as f64 + 0.5 - self.cx) / self.fx,
            (j as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        )
    }

    /// Continuous pixel coordinates of a camera-frame point (z > 0).
    pub fn project(&self, p_cam: &Vec3) -> (f64, f64) {
        (
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, depth: f64) -> Vec3 {
        self.origin + self.direction * depth
    }
}

/// One point marched along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySample {
    pub position: Vec3,
    /// Polar angle of the view direction, in `[0, π]`.
    pub theta: f64,
    /// Azimuth of the view direction, in `[-π, π)`.
    pub phi: f64,
    pub depth: f64,
    /// Compositing interval.
    pub delta: f64,
}

/// Spherical angles `(θ, φ)` of a unit direction.
pub fn direction_angles(d: &Vec3) -> (f64, f64) {
    let theta = d.z.clamp(-1.0, 1.0).acos();
    let mut phi = d.y.atan2(d.x);
    if phi >= std::f64::consts::PI {
        phi -= 2.0 * std::f64::consts::PI;
    }
    (theta, phi)
}

pub fn direction_from_angles(theta: f64, phi: f64) -> Vec3 {
    Vec3::new(
        theta.sin() * phi.cos(),
        theta.sin() * phi.sin(),
        theta.cos(),
    )
}

/// Learnable per-image pose delta: axis-angle rotation and additive translation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseCorrection {
    pub rotation: Vec3,
    pub translation: Vec3,
}

impl PoseCorrection {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_slice(s: &[f64]) -> Self {
        PoseCorrection {
            rotation: Vec3::new(s[0], s[1], s[2]),
            translation: Vec3::new(s[3], s[4], s[5]),
        }
    }

    pub fn write_to(&self, s: &mut [f64]) {
        s[..3].copy_from_slice(self.rotation.as_slice());
        s[3..6].copy_from_slice(self.translation.as_slice());
    }

    /// Same rotation expressed with `‖rotation‖ < π`.
    pub fn principal(&self) -> Self {
        PoseCorrection {
            rotation: principal_axis_angle(&self.rotation),
            translation: self.translation,
        }
    }
}

pub(crate) fn principal_axis_angle(w: &Vec3) -> Vec3 {
    let angle = w.norm();
    if angle < std::f64::consts::PI {
        return *w;
    }
    UnitQuaternion::from_scaled_axis(*w).scaled_axis()
}

/// Composes the correction on the camera-to-world side:
/// `q' = exp(rotation) · q`, `t' = t + translation`.
pub fn apply_pose_correction(pose: &Pose, corr: &PoseCorrection) -> Pose {
    if corr.rotation == Vec3::zeros() && corr.translation == Vec3::zeros() {
        return *pose;
    }
    let dq = UnitQuaternion::from_scaled_axis(corr.rotation);
    let mut q = dq * pose.q;
    q.renormalize();
    Pose {
        q,
        t: pose.t + corr.translation,
    }
}

/// Jacobian of `exp(ω)·v` with respect to `ω`.
///
/// Equals `-R(ω) [v]ₓ J_r(ω)` where `J_r` is the right Jacobian of SO(3).
pub fn rotate_jacobian(omega: &Vec3, v: &Vec3) -> Matrix3<f64> {
    let r = UnitQuaternion::from_scaled_axis(*omega).to_rotation_matrix().into_inner();
    -r * v.cross_matrix() * right_jacobian(omega)
}

fn right_jacobian(omega: &Vec3) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = omega.cross_matrix();
    let (a, b) = if theta2 < 1e-8 {
        // Taylor expansions of (1 - cos θ)/θ² and (θ - sin θ)/θ³.
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() - k * a + k * k * b
}

/// Ray through the center of pixel `(i, j)`.
pub fn cast_ray(pose: &Pose, intrinsics: &CameraIntrinsics, i: u32, j: u32) -> Ray {
    let d = pose.q * intrinsics.pixel_direction(i, j).normalize();
    Ray {
        origin: pose.t,
        direction: d.normalize(),
    }
}

pub fn cast_rays(
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    pixels: &[(u32, u32)],
) -> Result<Vec<Ray>> {
    pixels
        .iter()
        .map(|&(i, j)| {
            if i >= intrinsics.width || j >= intrinsics.height {
                Err(Error::invalid(format!(
                    "pixel ({i}, {j}) outside {}x{} image",
                    intrinsics.width, intrinsics.height
                )))
            } else {
                Ok(cast_ray(pose, intrinsics, i, j))
            }
        })
        .collect()
}

/// Stratified depths in `[near, far]`: the k-th depth lies in the k-th of `n`
/// equal bins (bin midpoint without jitter). Returns `(depths, deltas)` where
/// each delta is the gap to the next depth and the last is the bin width.
pub(crate) fn stratified_depths<R: Rng>(
    near: f64,
    far: f64,
    n: usize,
    mut jitter: Option<&mut R>,
    depths: &mut Vec<f64>,
    deltas: &mut Vec<f64>,
) {
    depths.clear();
    deltas.clear();
    let width = (far - near) / n as f64;
    for k in 0..n {
        let u = match jitter.as_deref_mut() {
            Some(rng) => rng.random::<f64>(),
            None => 0.5,
        };
        depths.push(near + (k as f64 + u) * width);
    }
    for k in 0..n {
        deltas.push(if k + 1 < n {
            depths[k + 1] - depths[k]
        } else {
            width
        });
    }
}

pub fn sample_along_ray(
    ray: &Ray,
    near: f64,
    far: f64,
    n_samples: usize,
    jitter_seed: Option<u64>,
) -> Result<Vec<RaySample>> {
    if !(near > 0.0 && near < far && far.is_finite()) {
        return Err(Error::invalid(format!(
            "sampling bounds must satisfy 0 < near < far, got near={near} far={far}"
        )));
    }
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }
    let mut depths = Vec::with_capacity(n_samples);
    let mut deltas = Vec::with_capacity(n_samples);
    match jitter_seed {
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            stratified_depths(near, far, n_samples, Some(&mut rng), &mut depths, &mut deltas)
        }
        None => stratified_depths::<ChaCha8Rng>(near, far, n_samples, None, &mut depths, &mut deltas),
    }
    let (theta, phi) = direction_angles(&ray.direction);
    Ok(depths
        .iter()
        .zip(&deltas)
        .map(|(&depth, &delta)| RaySample {
            position: ray.at(depth),
            theta,
            phi,
            depth,
            delta,
        })
        .collect())
}

/// Axis-aligned scene bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).all(|a| min[a] < max[a] && min[a].is_finite() && max[a].is_finite()) {
            Ok(Aabb { min, max })
        } else {
            Err(Error::invalid(format!("degenerate box {min:?}..{max:?}")))
        }
    }

    pub fn cube(half: f64) -> Self {
        Aabb {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }

    /// Radius of the circumscribed sphere.
    pub fn radius(&self) -> f64 {
        0.5 * Vec3::new(
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        )
        .norm()
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Slab-method intersection `[t0, t1]` of the ray with the box, if any.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let o = ray.origin[a];
            let d = ray.direction[a];
            if d.abs() < 1e-15 {
                if o < self.min[a] || o > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut ta, mut tb) = ((self.min[a] - o) * inv, (self.max[a] - o) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t1 > t0).then_some((t0, t1))
    }

    /// Depth interval to march for a ray: the box chord, intersected with the
    /// per-camera bounds `center ± 1.5·radius` along the view axis. `None` if
    /// the ray misses the scene.
    pub fn depth_range(&self, ray: &Ray) -> Option<(f64, f64)> {
        let (t0, t1) = self.intersect(ray)?;
        let dist = (self.center() - ray.origin).norm();
        let near = (dist - 1.5 * self.radius()).max(1e-3);
        let far = dist + 1.5 * self.radius();
        let lo = t0.max(near);
        let hi = t1.min(far);
        (hi > lo).then_some((lo, hi))
    }
}
