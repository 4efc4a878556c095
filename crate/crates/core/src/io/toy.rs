//! Procedural toy scene: spheres and boxes rendered analytically with
//! Lambertian shading. Serves as ground truth for reconstruction tests.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::UnitQuaternion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};

use super::image_io::{save_image, save_mask, ColorMode};
use super::manifest::{save_manifest, SceneManifest, Split, ViewRecord};
use crate::error::{Error, Result};
use crate::geometry::{cast_ray, Aabb, CameraIntrinsics, Pose, Ray, Vec3};
use crate::imaging::{Image, Mask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        albedo: [f64; 3],
    },
    /// Axis-aligned box.
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        albedo: [f64; 3],
    },
}

impl Primitive {
    fn albedo(&self) -> [f64; 3] {
        match self {
            Primitive::Sphere { albedo, .. } | Primitive::Box { albedo, .. } => *albedo,
        }
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let (c, h) = match self {
            Primitive::Sphere { center, radius, .. } => (*center, [*radius; 3]),
            Primitive::Box {
                center,
                half_extents,
                ..
            } => (*center, *half_extents),
        };
        (
            [c[0] - h[0], c[1] - h[1], c[2] - h[2]],
            [c[0] + h[0], c[1] + h[1], c[2] + h[2]],
        )
    }

    /// Nearest positive hit depth and outward normal.
    fn hit(&self, ray: &Ray) -> Option<(f64, Vec3)> {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                let c = Vec3::from(*center);
                let oc = ray.origin - c;
                let b = oc.dot(&ray.direction);
                let disc = b * b - (oc.norm_squared() - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = if -b - s > 0.0 { -b - s } else { -b + s };
                (t > 0.0).then(|| (t, (ray.at(t) - c) / *radius))
            }
            Primitive::Box {
                center,
                half_extents,
                ..
            } => {
                let (lo, hi) = self.bounds();
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                let mut axis0 = 0;
                for a in 0..3 {
                    let (o, d) = (ray.origin[a], ray.direction[a]);
                    if d.abs() < 1e-15 {
                        if o < lo[a] || o > hi[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((lo[a] - o) / d, (hi[a] - o) / d);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        axis0 = a;
                    }
                    t1 = t1.min(tb);
                }
                if t1 < t0 || t1 <= 0.0 || t0 <= 0.0 {
                    return None;
                }
                let p = ray.at(t0);
                let mut n = Vec3::zeros();
                n[axis0] = (p[axis0] - center[axis0]).signum();
                let _ = half_extents;
                Some((t0, n))
            }
        }
    }
}

/// Cameras on a sphere around `target`, looking at it with world +z up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitSpec {
    pub radius: f64,
    pub target: [f64; 3],
    /// Elevation range in degrees.
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySceneSpec {
    pub primitives: Vec<Primitive>,
    /// Directions towards the lights, world frame. Training views pick one at
    /// random and jitter it; held-out views use the first unjittered.
    pub lights: Vec<[f64; 3]>,
    pub light_jitter_deg: f64,
    pub ambient: f64,
    pub orbit: OrbitSpec,
    pub width: u32,
    pub height: u32,
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
    pub n_train: usize,
    pub n_heldout: usize,
    /// Label noise: exact rotation angle (degrees) and translation magnitude,
    /// applied in a random direction to each exported training pose.
    pub rotation_noise_deg: f64,
    pub translation_noise: f64,
    pub bounds: Aabb,
    pub color_mode: ColorMode,
}

impl Default for ToySceneSpec {
    fn default() -> Self {
        ToySceneSpec {
            primitives: vec![
                Primitive::Sphere {
                    center: [0.15, 0.1, 0.0],
                    radius: 0.55,
                    albedo: [0.8; 3],
                },
                Primitive::Box {
                    center: [-0.35, -0.25, -0.2],
                    half_extents: [0.3, 0.3, 0.45],
                    albedo: [0.6; 3],
                },
            ],
            lights: vec![[0.4, -0.5, 0.75]],
            light_jitter_deg: 35.0,
            ambient: 0.25,
            orbit: OrbitSpec {
                radius: 3.0,
                target: [0.0; 3],
                min_elevation_deg: -60.0,
                max_elevation_deg: 75.0,
            },
            width: 64,
            height: 64,
            focal_factor: 1.0,
            n_train: 100,
            n_heldout: 20,
            rotation_noise_deg: 0.0,
            translation_noise: 0.0,
            bounds: Aabb::cube(1.0),
            color_mode: ColorMode::Gray,
        }
    }
}

impl ToySceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.focal_factor <= 0.0 {
            return Err(Error::InvalidConfig("image size and focal must be positive".into()));
        }
        if self.orbit.radius <= self.bounds.radius() {
            return Err(Error::InvalidConfig(
                "orbit radius must put cameras outside the scene bounds".into(),
            ));
        }
        if self.lights.is_empty() && self.primitives.iter().len() > 0 {
            return Err(Error::InvalidConfig("at least one light is required".into()));
        }
        for l in &self.lights {
            if Vec3::from(*l).norm() < 1e-12 {
                return Err(Error::InvalidConfig("zero light direction".into()));
            }
        }
        for p in &self.primitives {
            let (lo, hi) = p.bounds();
            if !(self.bounds.contains(&Vec3::from(lo)) && self.bounds.contains(&Vec3::from(hi))) {
                return Err(Error::InvalidConfig(format!(
                    "primitive {p:?} does not fit inside the scene bounds"
                )));
            }
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::centered(self.focal_factor * self.width as f64, self.width, self.height)
    }

    fn orbit_pose(&self, azimuth: f64, elevation: f64) -> Pose {
        let target = Vec3::from(self.orbit.target);
        let (ce, se) = (elevation.cos(), elevation.sin());
        let eye = target + self.orbit.radius * Vec3::new(ce * azimuth.cos(), ce * azimuth.sin(), se);
        Pose::look_at(eye, target, Vec3::z())
    }

    /// Traces one ray; returns shaded color and whether anything was hit.
    pub fn shade_ray(&self, ray: &Ray, light: &Vec3) -> ([f64; 3], bool) {
        let mut best: Option<(f64, Vec3, [f64; 3])> = None;
        for p in &self.primitives {
            if let Some((t, n)) = p.hit(ray) {
                if best.as_ref().is_none_or(|b| t < b.0) {
                    best = Some((t, n, p.albedo()));
                }
            }
        }
        match best {
            None => ([0.0; 3], false),
            Some((_, n, albedo)) => {
                let lambert = n.dot(light).max(0.0);
                let s = self.ambient + (1.0 - self.ambient) * lambert;
                (albedo.map(|a| a * s), true)
            }
        }
    }

    /// Renders one view with the given light direction.
    pub fn render_view(&self, pose: &Pose, light: &Vec3) -> (Image, Mask) {
        let k = self.intrinsics();
        let light = light.normalize();
        let mut img = Image::new(k.width, k.height);
        let mut mask = Mask::new(k.width, k.height);
        for j in 0..k.height {
            for i in 0..k.width {
                let (c, hit) = self.shade_ray(&cast_ray(pose, &k, i, j), &light);
                let idx = (j * k.width + i) as usize;
                img.pixels[idx] = c;
                mask.data[idx] = hit;
            }
        }
        if self.color_mode == ColorMode::Gray {
            for p in &mut img.pixels {
                let y = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
                *p = [y; 3];
            }
        }
        (img, mask)
    }

    /// Exact silhouette from a pose.
    pub fn silhouette(&self, pose: &Pose, intrinsics: &CameraIntrinsics) -> Mask {
        let mut mask = Mask::new(intrinsics.width, intrinsics.height);
        let dummy = Vec3::z();
        for j in 0..intrinsics.height {
            for i in 0..intrinsics.width {
                let hit = self.shade_ray(&cast_ray(pose, intrinsics, i, j), &dummy).1;
                mask.data[(j * intrinsics.width + i) as usize] = hit;
            }
        }
        mask
    }
}

fn rotate_towards(v: &Vec3, angle: f64, rng: &mut ChaCha8Rng) -> Vec3 {
    if angle == 0.0 {
        return *v;
    }
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let axis = Vec3::from(axis).cross(v);
    if axis.norm() < 1e-9 {
        return *v;
    }
    UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle) * v
}

/// Perturbs a pose by an exact rotation angle about a random axis (applied in
/// the world frame about the camera center) and a translation of exact length.
pub fn perturb_pose(pose: &Pose, rotation_rad: f64, translation: f64, rng: &mut ChaCha8Rng) -> Pose {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let dir: [f64; 3] = UnitSphere.sample(rng);
    let dq = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_unchecked(Vec3::from(axis)), rotation_rad);
    let q = if rotation_rad == 0.0 { pose.q } else { dq * pose.q };
    let t = if translation == 0.0 {
        pose.t
    } else {
        pose.t + translation * Vec3::from(dir)
    };
    Pose::new(q, t)
}

/// A generated scene held in memory.
#[derive(Debug, Clone)]
pub struct ToyScene {
    pub spec: ToySceneSpec,
    pub intrinsics: CameraIntrinsics,
    /// Training views first, then held-out views.
    pub images: Vec<Image>,
    pub masks: Vec<Mask>,
    pub true_poses: Vec<Pose>,
    /// Exported labels; equal to `true_poses` for held-out views.
    pub label_poses: Vec<Pose>,
    pub lights: Vec<[f64; 3]>,
    pub splits: Vec<Split>,
}

impl ToyScene {
    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.splits.len()).filter(|&i| self.splits[i] == Split::Train).collect()
    }

    pub fn heldout_indices(&self) -> Vec<usize> {
        (0..self.splits.len()).filter(|&i| self.splits[i] == Split::Heldout).collect()
    }
}

pub fn generate_toy_scene(spec: &ToySceneSpec, seed: u64) -> Result<ToyScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intrinsics = spec.intrinsics();
    let (emin, emax) = (
        spec.orbit.min_elevation_deg.to_radians(),
        spec.orbit.max_elevation_deg.to_radians(),
    );
    // Elevations uniform in sin, so views cover the band evenly in area.
    let (smin, smax) = (emin.sin(), emax.sin());
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let az0: f64 = rng.random::<f64>() * std::f64::consts::TAU;

    let mut out = ToyScene {
        spec: spec.clone(),
        intrinsics,
        images: Vec::new(),
        masks: Vec::new(),
        true_poses: Vec::new(),
        label_poses: Vec::new(),
        lights: Vec::new(),
        splits: Vec::new(),
    };
    let nominal = spec.lights.first().map(|l| Vec3::from(*l).normalize()).unwrap_or(Vec3::z());
    for k in 0..spec.n_train + spec.n_heldout {
        let train = k < spec.n_train;
        let (az, el, light) = if train {
            let u = (k as f64 + rng.random::<f64>()) / spec.n_train as f64;
            let el = (smin + u * (smax - smin)).asin();
            let pick = rng.random_range(0..spec.lights.len().max(1));
            let base = spec.lights.get(pick).map(|l| Vec3::from(*l).normalize()).unwrap_or(nominal);
            let jitter = spec.light_jitter_deg.to_radians() * rng.random::<f64>();
            (az0 + golden * k as f64, el, rotate_towards(&base, jitter, &mut rng))
        } else {
            let el = (smin + rng.random::<f64>() * (smax - smin)).asin();
            (rng.random::<f64>() * std::f64::consts::TAU, el, nominal)
        };
        let pose = spec.orbit_pose(az, el);
        let (img, mask) = spec.render_view(&pose, &light);
        let label = if train {
            perturb_pose(
                &pose,
                spec.rotation_noise_deg.to_radians(),
                spec.translation_noise,
                &mut rng,
            )
        } else {
            pose
        };
        out.images.push(img);
        out.masks.push(mask);
        out.true_poses.push(pose);
        out.label_poses.push(label);
        out.lights.push([light.x, light.y, light.z]);
        out.splits.push(if train { Split::Train } else { Split::Heldout });
    }
    Ok(out)
}

#[derive(Serialize)]
struct GroundTruthLine {
    index: usize,
    q: [f64; 4],
    t: [f64; 3],
    light: [f64; 3],
}

/// Writes images, masks, `scene.jsonl` (label poses) and `ground_truth.jsonl`
/// (true poses and lights). Returns the manifest path.
pub fn write_toy_scene(scene: &ToyScene, dir: &Path) -> Result<PathBuf> {
    let mut views = Vec::new();
    let mut gt = String::new();
    for k in 0..scene.images.len() {
        let image = PathBuf::from(format!("images/{k:04}.png"));
        let mask = PathBuf::from(format!("masks/{k:04}.png"));
        save_image(&scene.images[k], scene.spec.color_mode, None, &dir.join(&image))?;
        save_mask(&scene.masks[k], &dir.join(&mask))?;
        views.push(ViewRecord {
            image,
            mask: Some(mask),
            pose: scene.label_poses[k],
            split: scene.splits[k],
        });
        let line = GroundTruthLine {
            index: k,
            q: scene.true_poses[k].wxyz(),
            t: scene.true_poses[k].translation(),
            light: scene.lights[k],
        };
        gt.push_str(&serde_json::to_string(&line).expect("serializes"));
        gt.push('\n');
    }
    let manifest = SceneManifest {
        intrinsics: scene.intrinsics,
        bounds: scene.spec.bounds,
        units: "scene units".into(),
        views,
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join("scene.jsonl");
    save_manifest(&manifest, &path)?;
    let gt_path = dir.join("ground_truth.jsonl");
    fs::write(&gt_path, gt).map_err(|e| Error::io(&gt_path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToySceneSpec {
        ToySceneSpec {
            width: 16,
            height: 12,
            n_train: 5,
            n_heldout: 2,
            ..ToySceneSpec::default()
        }
    }

    #[test]
    fn empty_scene_is_black() {
        let spec = ToySceneSpec {
            primitives: vec![],
            ..small()
        };
        let s = generate_toy_scene(&spec, 1).unwrap();
        assert!(s.images.iter().all(|im| im.pixels.iter().all(|p| *p == [0.0; 3])));
        assert!(s.masks.iter().all(|m| m.count() == 0));
    }

    #[test]
    fn unit_sphere_silhouette_is_analytic_disc() {
        let w = 64u32;
        let spec = ToySceneSpec {
            primitives: vec![Primitive::Sphere {
                center: [0.0; 3],
                radius: 1.0,
                albedo: [1.0; 3],
            }],
            width: w,
            height: w,
            ..ToySceneSpec::default()
        };
        let k = spec.intrinsics();
        let pose = Pose::look_at(Vec3::new(0.0, 0.0, -4.0), Vec3::zeros(), Vec3::y());
        let mask = spec.silhouette(&pose, &k);
        // Pixel-center ray hits iff its angle to the axis is below asin(1/4),
        // i.e. (x² + y²) / f² ≤ 1/15.
        let f = w as f64;
        for j in 0..w {
            for i in 0..w {
                let x = i as f64 + 0.5 - f / 2.0;
                let y = j as f64 + 0.5 - f / 2.0;
                assert_eq!(mask.get(i, j), 15.0 * (x * x + y * y) <= f * f, "({i},{j})");
            }
        }
        assert!(mask.count() > 800);
    }

    #[test]
    fn zero_noise_labels_are_true_poses() {
        let s = generate_toy_scene(&small(), 3).unwrap();
        assert_eq!(s.label_poses, s.true_poses);
        assert_eq!(s.train_indices().len(), 5);
        assert_eq!(s.heldout_indices(), vec![5, 6]);
    }

    #[test]
    fn label_noise_has_requested_magnitude() {
        let spec = ToySceneSpec {
            rotation_noise_deg: 1.0,
            translation_noise: 0.06,
            ..small()
        };
        let s = generate_toy_scene(&spec, 4).unwrap();
        for i in s.train_indices() {
            let r = s.label_poses[i].rotation_error(&s.true_poses[i]).to_degrees();
            assert!((r - 1.0).abs() < 1e-9, "{r}");
            assert!((s.label_poses[i].translation_error(&s.true_poses[i]) - 0.06).abs() < 1e-12);
        }
        for i in s.heldout_indices() {
            assert_eq!(s.label_poses[i], s.true_poses[i]);
        }
    }

    #[test]
    fn mask_matches_nonblack_pixels_and_deterministic() {
        let a = generate_toy_scene(&small(), 5).unwrap();
        let b = generate_toy_scene(&small(), 5).unwrap();
        assert_eq!(a.images, b.images);
        for (im, m) in a.images.iter().zip(&a.masks) {
            for (p, &hit) in im.pixels.iter().zip(&m.data) {
                assert_eq!(p[0] > 0.0, hit);
            }
            assert!(m.count() > 0);
        }
    }

    #[test]
    fn primitives_must_fit() {
        let spec = ToySceneSpec {
            bounds: Aabb::cube(0.5),
            ..small()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn writes_loadable_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_toy_scene(&small(), 6).unwrap();
        let path = write_toy_scene(&s, dir.path()).unwrap();
        let m = super::super::manifest::load_manifest(&path).unwrap();
        assert_eq!(m.views.len(), 7);
        let v = m.load_split(Split::Train).unwrap();
        assert_eq!(v.masks, s.masks[..5].to_vec());
    }
}
