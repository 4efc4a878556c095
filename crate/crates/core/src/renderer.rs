//! Differentiable alpha compositing and image/mask rendering.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{eval_color, eval_density, FieldParameters, ParamLayout};
use crate::geometry::{cast_ray, stratified_depths, CameraIntrinsics, Pose, Ray};
use crate::imaging::{Image, Mask};

/// One sample entering the compositor, front to back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeSample {
    pub sigma: f64,
    pub rgb: [f64; 3],
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeResult {
    /// `Σ wₙ·rgbₙ`, i.e. premultiplied by opacity.
    pub color: [f64; 3],
    pub opacity: f64,
    pub weights: Vec<f64>,
    /// `T₁..T_{N+1}`; the last entry is the residual transmittance.
    pub transmittance: Vec<f64>,
}

/// Fills `weights` (wₙ = Tₙ·αₙ) and `transmittance` (N+1 entries) for one ray.
pub(crate) fn compute_weights(
    sigmas: &[f64],
    deltas: &[f64],
    weights: &mut Vec<f64>,
    transmittance: &mut Vec<f64>,
) {
    weights.clear();
    transmittance.clear();
    let mut t = 1.0;
    transmittance.push(t);
    for (&s, &d) in sigmas.iter().zip(deltas) {
        let alpha = -(-s * d).exp_m1();
        weights.push(t * alpha);
        t *= 1.0 - alpha;
        transmittance.push(t);
    }
}

/// `1 − T_{N+1}`. Unlike `Σ wₙ` this is monotone in every σₙ after rounding.
pub(crate) fn opacity_from_transmittance(transmittance: &[f64]) -> f64 {
    1.0 - transmittance.last().copied().unwrap_or(1.0)
}

pub fn composite(samples: &[CompositeSample]) -> CompositeResult {
    let sigmas: Vec<f64> = samples.iter().map(|s| s.sigma).collect();
    let deltas: Vec<f64> = samples.iter().map(|s| s.delta).collect();
    let mut weights = Vec::with_capacity(samples.len());
    let mut transmittance = Vec::with_capacity(samples.len() + 1);
    compute_weights(&sigmas, &deltas, &mut weights, &mut transmittance);
    let mut color = [0.0; 3];
    for (w, s) in weights.iter().zip(samples) {
        for c in 0..3 {
            color[c] += w * s.rgb[c];
        }
    }
    CompositeResult {
        color,
        opacity: opacity_from_transmittance(&transmittance),
        weights,
        transmittance,
    }
}

/// Reverse pass of [`composite`]. Given `∂L/∂color` and `∂L/∂opacity`,
/// writes `∂L/∂σₙ` and `∂L/∂rgbₙ`.
///
/// With `sₙ = g_color·rgbₙ + g_opacity`:
/// `∂L/∂σₙ = δₙ·(T_{n+1}·sₙ − Σ_{m>n} wₘ·sₘ)` and `∂L/∂rgbₙ = wₙ·g_color`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn composite_backward(
    deltas: &[f64],
    rgbs: &[[f64; 3]],
    weights: &[f64],
    transmittance: &[f64],
    g_color: [f64; 3],
    g_opacity: f64,
    g_sigma: &mut [f64],
    g_rgb: &mut [[f64; 3]],
) {
    let n = deltas.len();
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        let c = rgbs[k];
        let s = g_color[0] * c[0] + g_color[1] * c[1] + g_color[2] * c[2] + g_opacity;
        g_sigma[k] = deltas[k] * (transmittance[k + 1] * s - suffix);
        suffix += weights[k] * s;
        let w = weights[k];
        g_rgb[k] = [w * g_color[0], w * g_color[1], w * g_color[2]];
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    #[default]
    Black,
    White,
}

impl std::str::FromStr for Background {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "black" => Ok(Background::Black),
            "white" => Ok(Background::White),
            _ => Err(Error::invalid(format!("unknown background {s:?}"))),
        }
    }
}

impl Background {
    pub fn value(self) -> f64 {
        match self {
            Background::Black => 0.0,
            Background::White => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Samples per ray.
    pub n_samples: usize,
    /// Opacity threshold τ for masks.
    pub mask_threshold: f64,
    /// Preview background.
    pub background: Background,
    /// Jitter seed for stratified sampling; `None` uses bin midpoints.
    pub jitter_seed: Option<u64>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            n_samples: 64,
            mask_threshold: 0.5,
            background: Background::Black,
            jitter_seed: None,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be at least 1".into()));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "mask threshold must lie in (0, 1), got {}",
                self.mask_threshold
            )));
        }
        Ok(())
    }
}

/// Per-pixel premultiplied color and accumulated opacity.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: u32,
    pub height: u32,
    pub color: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
}

impl RenderOutput {
    /// Composites over a constant background.
    pub fn to_image(&self, background: Background) -> Image {
        let b = background.value();
        Image {
            width: self.width,
            height: self.height,
            pixels: self
                .color
                .iter()
                .zip(&self.opacity)
                .map(|(c, &o)| {
                    let r = (1.0 - o) * b;
                    [c[0] + r, c[1] + r, c[2] + r]
                })
                .collect(),
        }
    }

    pub fn opacity_mask(&self, tau: f64) -> Mask {
        threshold_opacity(self.width, self.height, &self.opacity, tau)
    }
}

pub(crate) fn threshold_opacity(width: u32, height: u32, opacity: &[f64], tau: f64) -> Mask {
    Mask {
        width,
        height,
        data: opacity.iter().map(|&o| o >= tau).collect(),
    }
}

pub(crate) fn ray_seed(seed: u64, index: u64) -> u64 {
    seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Density-branch evaluation of one ray: everything needed to color it any
/// number of times with the same geometry.
#[derive(Debug, Clone, Default)]
pub struct DensityRay {
    pub deltas: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// `n × F_σ` features, sample-major.
    pub features: Vec<f64>,
    /// Direction features shared by every sample on the ray.
    pub direction_features: Vec<f64>,
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
}

impl DensityRay {
    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    pub fn opacity(&self) -> f64 {
        opacity_from_transmittance(&self.transmittance)
    }

    /// Evaluates `params` density at the stratified samples of `ray`.
    pub fn trace(
        params: &FieldParameters,
        ray: &Ray,
        n_samples: usize,
        jitter_seed: Option<u64>,
        scratch: &mut Vec<f64>,
    ) -> Self {
        let mut out = DensityRay::default();
        let Some((near, far)) = params.config().bounds.depth_range(ray) else {
            return out;
        };
        let layout = params.layout();
        let mut depths = Vec::with_capacity(n_samples);
        match jitter_seed {
            Some(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                stratified_depths(near, far, n_samples, Some(&mut rng), &mut depths, &mut out.deltas)
            }
            None => stratified_depths::<ChaCha8Rng>(
                near,
                far,
                n_samples,
                None,
                &mut depths,
                &mut out.deltas,
            ),
        }
        let f = layout.density_features;
        out.features.reserve(n_samples * f);
        for &t in &depths {
            let sigma = eval_density(params, &ray.at(t), scratch);
            out.sigmas.push(sigma);
            let dout = layout.density.output(scratch);
            out.features.extend_from_slice(&dout[1..]);
        }
        out.direction_features = layout.direction.encode(&ray.direction);
        compute_weights(&out.sigmas, &out.deltas, &mut out.weights, &mut out.transmittance);
        out
    }

    /// Premultiplied color using the given color network and embedding.
    pub fn shade(
        &self,
        layout: &ParamLayout,
        color_params: &[f64],
        embedding: &[f64],
        scratch: &mut Vec<f64>,
    ) -> [f64; 3] {
        let f = layout.density_features;
        let mut color = [0.0; 3];
        for (k, &w) in self.weights.iter().enumerate() {
            let rgb = eval_color(
                layout,
                color_params,
                &self.features[k * f..(k + 1) * f],
                &self.direction_features,
                embedding,
                scratch,
            );
            for c in 0..3 {
                color[c] += w * rgb[c];
            }
        }
        color
    }
}

fn check_embedding(params: &FieldParameters, embedding: &[f64]) -> Result<()> {
    if embedding.len() != params.layout().embedding_dim {
        return Err(Error::invalid(format!(
            "embedding has dimension {}, field expects {}",
            embedding.len(),
            params.layout().embedding_dim
        )));
    }
    Ok(())
}

pub fn render_image(
    params: &FieldParameters,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    embedding: &[f64],
    cfg: &RenderConfig,
) -> Result<RenderOutput> {
    render_image_with_color(params, params.color_params(), pose, intrinsics, embedding, cfg)
}

/// As [`render_image`] but shading with an explicit color-network parameter
/// slice (e.g. a perturbed copy).
pub fn render_image_with_color(
    params: &FieldParameters,
    color_params: &[f64],
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    embedding: &[f64],
    cfg: &RenderConfig,
) -> Result<RenderOutput> {
    cfg.validate()?;
    intrinsics.validate()?;
    check_embedding(params, embedding)?;
    if color_params.len() != params.color_params().len() {
        return Err(Error::invalid("color network parameter count mismatch"));
    }
    let w = intrinsics.width;
    let layout = params.layout();
    let pixels: Vec<([f64; 3], f64)> = (0..intrinsics.pixel_count())
        .into_par_iter()
        .map_init(
            || (Vec::new(), Vec::new()),
            |(ds, cs), idx| {
                let (i, j) = (idx as u32 % w, idx as u32 / w);
                let ray = cast_ray(pose, intrinsics, i, j);
                let seed = cfg.jitter_seed.map(|s| ray_seed(s, idx as u64));
                let dr = DensityRay::trace(params, &ray, cfg.n_samples, seed, ds);
                let color = dr.shade(layout, color_params, embedding, cs);
                (color, dr.opacity())
            },
        )
        .collect();
    Ok(RenderOutput {
        width: w,
        height: intrinsics.height,
        color: pixels.iter().map(|p| p.0).collect(),
        opacity: pixels.iter().map(|p| p.1).collect(),
    })
}

/// Accumulated opacity per pixel; uses the density branch only.
pub fn render_opacity(
    params: &FieldParameters,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    intrinsics.validate()?;
    let w = intrinsics.width;
    Ok((0..intrinsics.pixel_count())
        .into_par_iter()
        .map_init(Vec::new, |ds, idx| {
            let (i, j) = (idx as u32 % w, idx as u32 / w);
            let ray = cast_ray(pose, intrinsics, i, j);
            let seed = cfg.jitter_seed.map(|s| ray_seed(s, idx as u64));
            DensityRay::trace(params, &ray, cfg.n_samples, seed, ds).opacity()
        })
        .collect())
}

/// `mask = opacity ≥ τ`.
pub fn render_mask(
    params: &FieldParameters,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> Result<Mask> {
    let opacity = render_opacity(params, pose, intrinsics, cfg)?;
    Ok(threshold_opacity(
        intrinsics.width,
        intrinsics.height,
        &opacity,
        cfg.mask_threshold,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn cs(sigma: f64, rgb: [f64; 3], delta: f64) -> CompositeSample {
        CompositeSample { sigma, rgb, delta }
    }

    #[test]
    fn transparent_ray() {
        let r = composite(&[cs(0.0, [1.0, 0.5, 0.2], 0.3), cs(0.0, [0.1, 0.9, 0.2], 0.3)]);
        assert_eq!(r.color, [0.0; 3]);
        assert_eq!(r.opacity, 0.0);
        assert_eq!(*r.transmittance.last().unwrap(), 1.0);
    }

    #[test]
    fn saturated_first_sample() {
        let r = composite(&[cs(40.0, [0.3, 0.6, 0.9], 1.0), cs(5.0, [1.0, 1.0, 1.0], 1.0)]);
        for c in 0..3 {
            assert!((r.color[c] - [0.3, 0.6, 0.9][c]).abs() < 1e-12);
        }
        assert!((r.opacity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_sample_worked_case() {
        let r = composite(&[cs(1.0, [1.0, 0.0, 0.0], 1.0), cs(1.0, [0.0, 1.0, 0.0], 1.0)]);
        let a = 1.0 - (-1.0f64).exp();
        assert!((r.weights[0] - a).abs() < 1e-15);
        assert!((r.weights[1] - (1.0 - a) * a).abs() < 1e-15);
        assert!((r.weights[0] - 0.63212).abs() < 1e-5);
        assert!((r.weights[1] - 0.23254).abs() < 1e-5);
        assert!((r.color[0] - 0.63212).abs() < 1e-5);
        assert!((r.color[1] - 0.23254).abs() < 1e-5);
        assert_eq!(r.color[2], 0.0);
    }

    #[test]
    fn weights_and_residual_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.random_range(1..40);
            let s: Vec<_> = (0..n)
                .map(|_| cs(rng.random_range(0.0..20.0), [0.5; 3], rng.random_range(0.001..0.5)))
                .collect();
            let r = composite(&s);
            let total: f64 = r.weights.iter().sum::<f64>() + r.transmittance[n];
            assert!((total - 1.0).abs() < 1e-12);
            assert!(r.weights.iter().all(|&w| w >= 0.0));
            assert!(r.opacity <= 1.0);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 7;
        let samples: Vec<_> = (0..n)
            .map(|_| {
                cs(
                    rng.random_range(0.0..4.0),
                    [rng.random(), rng.random(), rng.random()],
                    rng.random_range(0.05..0.4),
                )
            })
            .collect();
        let gc = [0.3, -1.2, 0.7];
        let go = 0.45;
        let loss = |s: &[CompositeSample]| {
            let r = composite(s);
            r.color[0] * gc[0] + r.color[1] * gc[1] + r.color[2] * gc[2] + r.opacity * go
        };
        let r = composite(&samples);
        let deltas: Vec<f64> = samples.iter().map(|s| s.delta).collect();
        let rgbs: Vec<[f64; 3]> = samples.iter().map(|s| s.rgb).collect();
        let mut gs = vec![0.0; n];
        let mut gr = vec![[0.0; 3]; n];
        composite_backward(&deltas, &rgbs, &r.weights, &r.transmittance, gc, go, &mut gs, &mut gr);
        let h = 1e-6;
        for k in 0..n {
            let mut p = samples.clone();
            p[k].sigma += h;
            let mut m = samples.clone();
            m[k].sigma -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - gs[k]).abs() <= 1e-4 * fd.abs().max(1e-6), "{fd} {}", gs[k]);
            for c in 0..3 {
                let mut p = samples.clone();
                p[k].rgb[c] += h;
                let mut m = samples.clone();
                m[k].rgb[c] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - gr[k][c]).abs() <= 1e-4 * fd.abs().max(1e-6));
            }
        }
    }

    #[test]
    fn opacity_is_monotone_in_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mut s: Vec<_> = (0..10)
                .map(|_| cs(rng.random_range(0.0..3.0), [0.2; 3], 0.1))
                .collect();
            let before = composite(&s).opacity;
            let k = rng.random_range(0..10);
            s[k].sigma += rng.random_range(0.0..5.0);
            assert!(composite(&s).opacity >= before);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = RenderConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.mask_threshold = 1.0;
        assert!(cfg.validate().is_err());
        cfg.mask_threshold = 0.5;
        cfg.n_samples = 0;
        assert!(cfg.validate().is_err());
    }
}
