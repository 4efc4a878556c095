//! Appearance-randomized dataset synthesis.
//!
//! For every pose label one mask is rendered from the density-supervised
//! field and `N_cfg` images from the appearance field. Within a pose the
//! appearance field's density branch is evaluated once per ray and then
//! shaded once per configuration, so all images of a pose share geometry.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen, UnitQuaternion};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldParameters;
use crate::geometry::{cast_ray, Aabb, CameraIntrinsics, Pose, Vec3};
use crate::imaging::{Image, Mask};
use crate::io::image_io::{load_image, save_image, save_mask, ColorMode};
use crate::io::manifest::parse_pose;
use crate::renderer::{
    ray_seed, render_opacity, threshold_opacity, DensityRay, RenderConfig, RenderOutput,
};

/// Gaussian model of the learned embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDistribution {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub embeddings: Vec<Vec<f64>>,
    /// `L` with `L Lᵀ = Σ` after clamping negative eigenvalues.
    factor: DMatrix<f64>,
}

impl EmbeddingDistribution {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

pub fn fit_embedding_distribution(embeddings: &[Vec<f64>]) -> Result<EmbeddingDistribution> {
    let n = embeddings.len();
    if n == 0 {
        return Err(Error::invalid("cannot fit a distribution to zero embeddings"));
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::invalid("embeddings differ in dimension"));
    }
    let mut mean = DVector::zeros(d);
    for e in embeddings {
        mean += DVector::from_column_slice(e);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for e in embeddings {
        let c = DVector::from_column_slice(e) - &mean;
        cov += &c * c.transpose();
    }
    cov /= n as f64;
    // Exact symmetry regardless of summation order.
    let cov = (&cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(cov.clone());
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let factor = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals);
    Ok(EmbeddingDistribution {
        mean,
        covariance: cov,
        embeddings: embeddings.to_vec(),
        factor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Uniform,
    Interpolate,
    Extrapolate,
    Gaussian,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Uniform,
        Strategy::Interpolate,
        Strategy::Extrapolate,
        Strategy::Gaussian,
    ];

    pub fn is_pairwise(self) -> bool {
        matches!(self, Strategy::Interpolate | Strategy::Extrapolate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyWeights {
    pub uniform: f64,
    pub interpolate: f64,
    pub extrapolate: f64,
    pub gaussian: f64,
}

impl Default for StrategyWeights {
    fn default() -> Self {
        StrategyWeights {
            uniform: 0.25,
            interpolate: 0.25,
            extrapolate: 0.25,
            gaussian: 0.25,
        }
    }
}

impl StrategyWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.uniform, self.interpolate, self.extrapolate, self.gaussian]
    }

    fn sampler(&self) -> Result<WeightedIndex<f64>> {
        let w = self.as_array();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(format!("bad strategy weights {w:?}")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "strategy weights must sum to 1, got {sum}"
            )));
        }
        WeightedIndex::new(w).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn choose<R: Rng>(&self, rng: &mut R) -> Result<Strategy> {
        Ok(Strategy::ALL[self.sampler()?.sample(rng)])
    }
}

/// How one embedding was drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDraw {
    pub strategy: Strategy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub j: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

/// `e_i + α (e_j − e_i)`.
pub fn interpolate(ei: &[f64], ej: &[f64], alpha: f64) -> Vec<f64> {
    if alpha == 0.0 {
        return ei.to_vec();
    }
    if alpha == 1.0 {
        return ej.to_vec();
    }
    ei.iter().zip(ej).map(|(a, b)| a + alpha * (b - a)).collect()
}

/// Draws an embedding. `forced_alpha` overrides the random coefficient of the
/// pairwise strategies; `extrapolation` is the reach beyond `[0, 1]`.
pub fn sample_embedding<R: Rng>(
    dist: &EmbeddingDistribution,
    strategy: Strategy,
    extrapolation: f64,
    forced_alpha: Option<f64>,
    rng: &mut R,
) -> Result<(Vec<f64>, EmbeddingDraw)> {
    let n = dist.len();
    if strategy.is_pairwise() && n < 2 {
        return Err(Error::InvalidConfig(format!(
            "{strategy:?} needs at least two embeddings, have {n}"
        )));
    }
    let mut draw = EmbeddingDraw {
        strategy,
        i: None,
        j: None,
        alpha: None,
    };
    let e = match strategy {
        Strategy::Uniform => {
            let i = rng.random_range(0..n);
            draw.i = Some(i);
            dist.embeddings[i].clone()
        }
        Strategy::Interpolate | Strategy::Extrapolate => {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            let alpha = forced_alpha.unwrap_or_else(|| {
                if strategy == Strategy::Interpolate {
                    rng.random::<f64>()
                } else {
                    let u = rng.random::<f64>() * extrapolation;
                    if rng.random::<bool>() {
                        -u
                    } else {
                        1.0 + u
                    }
                }
            });
            draw.i = Some(i);
            draw.j = Some(j);
            draw.alpha = Some(alpha);
            interpolate(&dist.embeddings[i], &dist.embeddings[j], alpha)
        }
        Strategy::Gaussian => {
            let z = DVector::from_fn(dist.dim(), |_, _| StandardNormal.sample(rng));
            let e = &dist.mean + &dist.factor * z;
            e.iter().copied().collect()
        }
    };
    Ok((e, draw))
}

/// Copy of the color-network parameters with per-layer relative Gaussian
/// noise: every weight and bias of layer `l` gets `N(0, (s·σ_l)²)`, where
/// `σ_l` is the standard deviation of that layer's weights.
pub fn perturb_color_network<R: Rng>(
    params: &FieldParameters,
    scale: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!("noise scale must be >= 0, got {scale}")));
    }
    let mut out = params.color_params().to_vec();
    if scale == 0.0 {
        return Ok(out);
    }
    let mlp = &params.layout().color;
    for l in 0..mlp.n_layers() {
        let (w, b) = mlp.layer_ranges(l);
        let ws = &out[w.clone()];
        let mean = ws.iter().sum::<f64>() / ws.len() as f64;
        let std = (ws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ws.len() as f64).sqrt();
        let s = scale * std;
        for v in &mut out[w.start..b.end] {
            let z: f64 = StandardNormal.sample(rng);
            *v += s * z;
        }
    }
    Ok(out)
}

/// `out = m·fg + (1 − m·opacity)·bg` with premultiplied `fg`. Without a mask
/// this is the plain straight-alpha "over".
pub fn composite_background(
    foreground: &RenderOutput,
    mask: Option<&Mask>,
    background: &Image,
) -> Result<Image> {
    let (w, h) = (foreground.width, foreground.height);
    if background.width != w || background.height != h {
        return Err(Error::invalid(format!(
            "background is {}x{}, foreground is {w}x{h}",
            background.width, background.height
        )));
    }
    if let Some(m) = mask {
        if m.width != w || m.height != h {
            return Err(Error::invalid("mask resolution differs from foreground"));
        }
    }
    let pixels = (0..foreground.color.len())
        .map(|k| {
            let m = mask.map_or(1.0, |m| m.data[k] as u8 as f64);
            let fg = foreground.color[k];
            let bg = background.pixels[k];
            let r = 1.0 - m * foreground.opacity[k];
            [0, 1, 2].map(|c| m * fg[c] + r * bg[c])
        })
        .collect();
    Ok(Image {
        width: w,
        height: h,
        pixels,
    })
}

/// Area-averaging resample (also handles upsampling by nearest cover).
pub fn resample_area(img: &Image, width: u32, height: u32) -> Image {
    if img.width == width && img.height == height {
        return img.clone();
    }
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / height as f64;
    let mut out = Image::new(width, height);
    for j in 0..height {
        let (y0, y1) = (j as f64 * sy, (j + 1) as f64 * sy);
        for i in 0..width {
            let (x0, x1) = (i as f64 * sx, (i + 1) as f64 * sx);
            let mut acc = [0.0; 3];
            let mut total = 0.0;
            let mut y = y0.floor() as u32;
            while (y as f64) < y1 && y < img.height {
                let wy = (y1.min(y as f64 + 1.0) - y0.max(y as f64)).max(0.0);
                let mut x = x0.floor() as u32;
                while (x as f64) < x1 && x < img.width {
                    let wx = (x1.min(x as f64 + 1.0) - x0.max(x as f64)).max(0.0);
                    let p = img.get(x, y);
                    for c in 0..3 {
                        acc[c] += wx * wy * p[c];
                    }
                    total += wx * wy;
                    x += 1;
                }
                y += 1;
            }
            out.set(i, j, acc.map(|a| a / total));
        }
    }
    out
}

/// Built-in pose-label sampler: uniform random orientation, object center
/// placed uniformly in depth within `[min_distance, max_distance]` and
/// uniformly across the central `fill` fraction of the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseSamplerConfig {
    pub min_distance: f64,
    pub max_distance: f64,
    pub fill: f64,
}

impl Default for PoseSamplerConfig {
    fn default() -> Self {
        PoseSamplerConfig {
            min_distance: 2.5,
            max_distance: 4.0,
            fill: 0.6,
        }
    }
}

pub fn sample_pose_labels(
    n: usize,
    sampler: &PoseSamplerConfig,
    intrinsics: &CameraIntrinsics,
    bounds: &Aabb,
    seed: u64,
) -> Result<Vec<Pose>> {
    if !(sampler.min_distance > 0.0 && sampler.max_distance >= sampler.min_distance) {
        return Err(Error::InvalidConfig("bad pose-sampler distance range".into()));
    }
    if !(sampler.fill > 0.0 && sampler.fill <= 1.0) {
        return Err(Error::InvalidConfig("pose-sampler fill must lie in (0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = bounds.center();
    let (w, h) = (intrinsics.width as f64, intrinsics.height as f64);
    Ok((0..n)
        .map(|_| {
            // Uniform unit quaternion (Shoemake).
            let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
            let tau = std::f64::consts::TAU;
            let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
            let q = nalgebra::Quaternion::new(
                b * (tau * u3).cos(),
                a * (tau * u2).sin(),
                a * (tau * u2).cos(),
                b * (tau * u3).sin(),
            );
            let r_cw = UnitQuaternion::new_normalize(q);
            let depth = sampler.min_distance
                + rng.random::<f64>() * (sampler.max_distance - sampler.min_distance);
            let px = w * (0.5 + sampler.fill * (rng.random::<f64>() - 0.5));
            let py = h * (0.5 + sampler.fill * (rng.random::<f64>() - 0.5));
            let ray = Vec3::new(
                (px - intrinsics.cx) / intrinsics.fx,
                (py - intrinsics.cy) / intrinsics.fy,
                1.0,
            );
            let p_cam = depth * ray.normalize();
            let t_cw = p_cam - r_cw * center;
            Pose::new(r_cw, t_cw).inverse()
        })
        .collect())
}

#[derive(Deserialize)]
struct LabelLine {
    q: [f64; 4],
    t: [f64; 3],
}

/// Reads world-from-camera labels, one `{"q":[w,x,y,z],"t":[x,y,z]}` per line.
pub fn load_pose_labels(path: &Path) -> Result<Vec<Pose>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: LabelLine = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        out.push(parse_pose(rec.q, rec.t).map_err(err)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub n_labels: usize,
    pub n_illumination: usize,
    pub n_color: usize,
    pub strategy_weights: StrategyWeights,
    /// Extrapolation draws α from `[-r, 0) ∪ (1, 1 + r]`.
    pub extrapolation_range: f64,
    /// Color-noise scales, cycled across color configurations.
    pub color_scales: Vec<f64>,
    pub mask_threshold: f64,
    pub background_pool: Vec<PathBuf>,
    pub background_probability: f64,
    pub width: u32,
    pub height: u32,
    pub n_samples: usize,
    pub color_mode: ColorMode,
    /// Optional label file; otherwise labels come from the built-in sampler.
    pub labels: Option<PathBuf>,
    pub pose_sampler: PoseSamplerConfig,
    /// Rows rendered per block; bounds memory for large images.
    pub block_rows: u32,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            n_labels: 100,
            n_illumination: 24,
            n_color: 40,
            strategy_weights: StrategyWeights::default(),
            extrapolation_range: 0.5,
            color_scales: vec![0.05, 0.10],
            mask_threshold: 0.5,
            background_pool: Vec::new(),
            background_probability: 0.5,
            width: 768,
            height: 512,
            n_samples: 64,
            color_mode: ColorMode::Gray,
            labels: None,
            pose_sampler: PoseSamplerConfig::default(),
            block_rows: 16,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn n_configs(&self) -> usize {
        self.n_illumination + self.n_color
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.n_configs() == 0 {
            return bad("at least one appearance configuration is required");
        }
        if self.n_illumination > 0 {
            self.strategy_weights.sampler()?;
        }
        if !(self.extrapolation_range > 0.0 && self.extrapolation_range.is_finite()) {
            return bad("extrapolation range must be positive");
        }
        if self.n_color > 0
            && (self.color_scales.is_empty()
                || self.color_scales.iter().any(|s| !(*s >= 0.0 && s.is_finite())))
        {
            return bad("color scales must be non-empty and non-negative");
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return bad("mask threshold must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.background_probability) {
            return bad("background probability must lie in [0, 1]");
        }
        if self.width == 0 || self.height == 0 || self.n_samples == 0 || self.block_rows == 0 {
            return bad("resolution, sample count and block size must be positive");
        }
        Ok(())
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            n_samples: self.n_samples,
            mask_threshold: self.mask_threshold,
            ..RenderConfig::default()
        }
    }
}

/// Provenance of one appearance configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AppearanceConfig {
    Illumination {
        #[serde(flatten)]
        draw: EmbeddingDraw,
    },
    Color {
        scale: f64,
        noise_seed: u64,
        /// Training embedding used while shading.
        embedding_index: usize,
    },
}

/// A configuration resolved to concrete shading inputs.
pub struct ResolvedConfig {
    pub descriptor: AppearanceConfig,
    pub embedding: Vec<f64>,
    /// `None` keeps the trained color network.
    pub color_params: Option<Vec<f64>>,
}

fn pose_rng(seed: u64, pose_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pose_index as u64 + 1);
    rng
}

/// Draws the `N_cfg` appearance configurations of one pose.
pub fn draw_configs(
    appearance: &FieldParameters,
    dist: &EmbeddingDistribution,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ResolvedConfig>> {
    let mut out = Vec::with_capacity(cfg.n_configs());
    for _ in 0..cfg.n_illumination {
        let strategy = cfg.strategy_weights.choose(rng)?;
        let (embedding, draw) =
            sample_embedding(dist, strategy, cfg.extrapolation_range, None, rng)?;
        out.push(ResolvedConfig {
            descriptor: AppearanceConfig::Illumination { draw },
            embedding,
            color_params: None,
        });
    }
    for k in 0..cfg.n_color {
        let scale = cfg.color_scales[k % cfg.color_scales.len()];
        let noise_seed: u64 = rng.random();
        let embedding_index = rng.random_range(0..dist.len());
        let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let color = perturb_color_network(appearance, scale, &mut noise_rng)?;
        out.push(ResolvedConfig {
            descriptor: AppearanceConfig::Color {
                scale,
                noise_seed,
                embedding_index,
            },
            embedding: dist.embeddings[embedding_index].clone(),
            color_params: Some(color),
        });
    }
    Ok(out)
}

/// All renders of one pose.
#[derive(Debug, Clone)]
pub struct PoseRenders {
    /// Mask from the density-supervised field.
    pub mask: Mask,
    /// One foreground render per configuration, sharing one opacity map.
    pub renders: Vec<RenderOutput>,
}

/// Renders one pose for every configuration with a single density pass of
/// the appearance field per ray.
pub fn render_pose(
    appearance: &FieldParameters,
    geometry: &FieldParameters,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    configs: &[ResolvedConfig],
    cfg: &AugmentConfig,
) -> Result<PoseRenders> {
    let rcfg = cfg.render_config();
    let opacity_psi = render_opacity(geometry, pose, intrinsics, &rcfg)?;
    let mask = threshold_opacity(intrinsics.width, intrinsics.height, &opacity_psi, cfg.mask_threshold);

    let d = appearance.layout().embedding_dim;
    for c in configs {
        if c.embedding.len() != d {
            return Err(Error::invalid("embedding dimension mismatch"));
        }
    }
    let n_pix = intrinsics.pixel_count();
    let w = intrinsics.width;
    let mut opacity = Vec::with_capacity(n_pix);
    let mut colors: Vec<Vec<[f64; 3]>> = vec![Vec::with_capacity(n_pix); configs.len()];
    let layout = appearance.layout();
    let block = cfg.block_rows as usize * w as usize;
    for start in (0..n_pix).step_by(block) {
        let end = (start + block).min(n_pix);
        let rows: Vec<(f64, Vec<[f64; 3]>)> = (start..end)
            .into_par_iter()
            .map_init(
                || (Vec::new(), Vec::new()),
                |(ds, cs), idx| {
                    let (i, j) = (idx as u32 % w, idx as u32 / w);
                    let ray = cast_ray(pose, intrinsics, i, j);
                    let seed = rcfg.jitter_seed.map(|s| ray_seed(s, idx as u64));
                    let dr = DensityRay::trace(appearance, &ray, rcfg.n_samples, seed, ds);
                    let shaded = configs
                        .iter()
                        .map(|c| {
                            let color = c.color_params.as_deref().unwrap_or(appearance.color_params());
                            dr.shade(layout, color, &c.embedding, cs)
                        })
                        .collect();
                    (dr.opacity(), shaded)
                },
            )
            .collect();
        for (o, shaded) in rows {
            opacity.push(o);
            for (k, c) in shaded.into_iter().enumerate() {
                colors[k].push(c);
            }
        }
    }
    let renders = colors
        .into_iter()
        .map(|color| RenderOutput {
            width: w,
            height: intrinsics.height,
            color,
            opacity: opacity.clone(),
        })
        .collect();
    Ok(PoseRenders { mask, renders })
}

/// One manifest record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub q: [f64; 4],
    pub t: [f64; 3],
    pub pose_index: usize,
    pub config_index: usize,
    pub appearance: AppearanceConfig,
    /// Background image used, if any.
    pub background: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub pose_index: usize,
    pub config_index: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct AugmentReport {
    pub samples: Vec<GeneratedSample>,
    pub masks: Vec<PathBuf>,
    pub errors: Vec<SampleError>,
    pub manifest: PathBuf,
}

fn check_compatible(appearance: &FieldParameters, geometry: &FieldParameters) -> Result<()> {
    if appearance.n_images() == 0 {
        return Err(Error::invalid("appearance field has no learned embeddings"));
    }
    if appearance.config().bounds != geometry.config().bounds {
        return Err(Error::invalid("fields were trained with different scene bounds"));
    }
    Ok(())
}

fn load_background_pool(cfg: &AugmentConfig) -> Result<Vec<Image>> {
    cfg.background_pool
        .iter()
        .map(|p| Ok(resample_area(&load_image(p)?, cfg.width, cfg.height)))
        .collect()
}

/// Renders the augmented set into `out_dir`: `images/`, `masks/`,
/// `samples.jsonl` and, if anything failed, `errors.jsonl`.
///
/// `intrinsics` are the training intrinsics; they are rescaled to the
/// configured output resolution.
pub fn generate_augmented_set(
    appearance: &FieldParameters,
    geometry: &FieldParameters,
    labels: &[Pose],
    intrinsics: &CameraIntrinsics,
    cfg: &AugmentConfig,
    out_dir: &Path,
) -> Result<AugmentReport> {
    cfg.validate()?;
    check_compatible(appearance, geometry)?;
    if labels.is_empty() {
        return Err(Error::invalid("no pose labels"));
    }
    let k = intrinsics.scaled_to(cfg.width, cfg.height);
    k.validate()?;
    let dist = fit_embedding_distribution(&appearance.embeddings())?;
    let pool = load_background_pool(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    struct PoseResult {
        samples: Vec<GeneratedSample>,
        mask: Option<PathBuf>,
        errors: Vec<SampleError>,
    }

    let results: Vec<Result<PoseResult>> = labels
        .par_iter()
        .enumerate()
        .map(|(p, pose)| {
            let mut rng = pose_rng(cfg.seed, p);
            let configs = draw_configs(appearance, &dist, cfg, &mut rng)?;
            let renders = render_pose(appearance, geometry, pose, &k, &configs, cfg)?;
            let mut res = PoseResult {
                samples: Vec::new(),
                mask: None,
                errors: Vec::new(),
            };
            let mask_path = PathBuf::from(format!("masks/{p:05}.png"));
            match save_mask(&renders.mask, &out_dir.join(&mask_path)) {
                Ok(()) => res.mask = Some(mask_path.clone()),
                Err(e) => {
                    res.errors.push(SampleError {
                        pose_index: p,
                        config_index: None,
                        message: e.to_string(),
                    });
                    return Ok(res);
                }
            }
            for (c, (conf, render)) in configs.into_iter().zip(&renders.renders).enumerate() {
                let sample_seed: u64 = rng.random();
                let use_bg = !pool.is_empty() && rng.random::<f64>() < cfg.background_probability;
                let (img, background) = if use_bg {
                    let b = rng.random_range(0..pool.len());
                    (
                        composite_background(render, Some(&renders.mask), &pool[b])?,
                        Some(cfg.background_pool[b].clone()),
                    )
                } else {
                    let black = Image::new(k.width, k.height);
                    (composite_background(render, Some(&renders.mask), &black)?, None)
                };
                let image_path = PathBuf::from(format!("images/{p:05}_{c:03}.png"));
                match save_image(&img, cfg.color_mode, None, &out_dir.join(&image_path)) {
                    Ok(()) => res.samples.push(GeneratedSample {
                        image: image_path,
                        mask: mask_path.clone(),
                        q: pose.wxyz(),
                        t: pose.translation(),
                        pose_index: p,
                        config_index: c,
                        appearance: conf.descriptor,
                        background,
                        seed: sample_seed,
                    }),
                    Err(e) => res.errors.push(SampleError {
                        pose_index: p,
                        config_index: Some(c),
                        message: e.to_string(),
                    }),
                }
            }
            Ok(res)
        })
        .collect();

    let mut report = AugmentReport {
        manifest: out_dir.join("samples.jsonl"),
        ..AugmentReport::default()
    };
    for r in results {
        let r = r?;
        report.samples.extend(r.samples);
        report.masks.extend(r.mask);
        report.errors.extend(r.errors);
    }
    let mut text = String::new();
    for s in &report.samples {
        text.push_str(&serde_json::to_string(s).expect("sample serializes"));
        text.push('\n');
    }
    fs::write(&report.manifest, text).map_err(|e| Error::io(&report.manifest, e))?;
    if !report.errors.is_empty() {
        let path = out_dir.join("errors.jsonl");
        let mut text = String::new();
        for e in &report.errors {
            log::warn!("pose {} config {:?}: {}", e.pose_index, e.config_index, e.message);
            text.push_str(&serde_json::to_string(e).expect("error serializes"));
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;

    fn dist(v: &[&[f64]]) -> EmbeddingDistribution {
        fit_embedding_distribution(&v.iter().map(|e| e.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn fit_two_points() {
        let d = dist(&[&[0.0, 0.0], &[2.0, 0.0]]);
        assert_eq!(d.mean.as_slice(), &[1.0, 0.0]);
        assert_eq!(d.covariance, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        let single = dist(&[&[0.3, -0.2, 5.0]]);
        assert_eq!(single.mean.as_slice(), &[0.3, -0.2, 5.0]);
        assert!(single.covariance.iter().all(|&v| v == 0.0));
        assert!(fit_embedding_distribution(&[]).is_err());
    }

    #[test]
    fn interpolation_examples() {
        let d = dist(&[&[0.0, 0.0], &[2.0, 4.0]]);
        assert_eq!(interpolate(&[0.0, 0.0], &[2.0, 4.0], 0.25), vec![0.5, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for alpha in [0.0, 1.0] {
            let (e, draw) = sample_embedding(&d, Strategy::Interpolate, 0.5, Some(alpha), &mut rng).unwrap();
            let target = if alpha == 0.0 { draw.i } else { draw.j }.unwrap();
            assert_eq!(e, d.embeddings[target]);
        }
    }

    #[test]
    fn degenerate_gaussian_returns_point() {
        let v = [0.7, -1.3, 2.5];
        let d = dist(&[&v, &v]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let (e, _) = sample_embedding(&d, Strategy::Gaussian, 0.5, None, &mut rng).unwrap();
            assert_eq!(e, v.to_vec());
        }
    }

    #[test]
    fn pairwise_needs_two() {
        let d = dist(&[&[1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_embedding(&d, Strategy::Extrapolate, 0.5, None, &mut rng).is_err());
        assert!(sample_embedding(&d, Strategy::Uniform, 0.5, None, &mut rng).is_ok());
    }

    #[test]
    fn extrapolation_alpha_range() {
        let d = dist(&[&[0.0], &[1.0], &[3.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let (_, draw) = sample_embedding(&d, Strategy::Extrapolate, 0.5, None, &mut rng).unwrap();
            let a = draw.alpha.unwrap();
            assert!((-0.5..=0.0).contains(&a) || (1.0..=1.5).contains(&a), "{a}");
            assert_ne!(draw.i, draw.j);
        }
    }

    fn tiny_field(n_images: usize, seed: u64) -> FieldParameters {
        let cfg = FieldConfig {
            grid_resolution: 6,
            grid_channels: 2,
            density_hidden: vec![8],
            density_features: 3,
            color_hidden: vec![8],
            embedding_dim: 2,
            sh_degree: 1,
            n_images,
            bounds: Aabb::cube(1.0),
        };
        let mut p = FieldParameters::initialized(cfg, seed).unwrap();
        // Some density so the renders are not empty.
        let g = p.layout().grid.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut p.values_mut()[g] {
            *v = rng.random_range(-1.0..1.0);
        }
        p
    }

    #[test]
    fn zero_noise_is_bit_identical() {
        let p = tiny_field(3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = perturb_color_network(&p, 0.0, &mut rng).unwrap();
        assert_eq!(
            q.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            p.color_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let q = perturb_color_network(&p, 0.1, &mut rng).unwrap();
        assert_ne!(q, p.color_params());
        assert!(perturb_color_network(&p, -1.0, &mut rng).is_err());
    }

    #[test]
    fn composite_cases() {
        let fg = |c: f64, o: f64| RenderOutput {
            width: 2,
            height: 1,
            color: vec![[c * o; 3]; 2],
            opacity: vec![o; 2],
        };
        let bg = Image::filled(2, 1, [0.3, 0.6, 0.9]);
        assert_eq!(composite_background(&fg(0.4, 1.0), None, &bg).unwrap().pixels, vec![[0.4; 3]; 2]);
        assert_eq!(composite_background(&fg(0.4, 0.0), None, &bg).unwrap().pixels, bg.pixels);
        let black = Image::new(2, 1);
        assert_eq!(composite_background(&fg(1.0, 0.5), None, &black).unwrap().pixels, vec![[0.5; 3]; 2]);
        assert!(composite_background(&fg(1.0, 0.5), None, &Image::new(3, 1)).is_err());
    }

    #[test]
    fn resample_averages() {
        let mut img = Image::new(4, 2);
        for i in 0..4 {
            for j in 0..2 {
                img.set(i, j, [(i + 4 * j) as f64; 3]);
            }
        }
        let r = resample_area(&img, 2, 1);
        assert_eq!(r.pixels, vec![[(0.0 + 1.0 + 4.0 + 5.0) / 4.0; 3], [(2.0 + 3.0 + 6.0 + 7.0) / 4.0; 3]]);
    }

    #[test]
    fn pose_sampler_puts_object_in_view() {
        let k = CameraIntrinsics::centered(64.0, 64, 48);
        let poses = sample_pose_labels(50, &PoseSamplerConfig::default(), &k, &Aabb::cube(1.0), 3).unwrap();
        for p in poses {
            let c = p.inverse().transform_point(&Vec3::zeros());
            assert!(c.z > 0.0);
            let d = c.norm();
            assert!((2.5 - 1e-9..=4.0 + 1e-9).contains(&d));
            let (u, v) = k.project(&c);
            assert!((0.0..64.0).contains(&u) && (0.0..48.0).contains(&v));
        }
    }

    #[test]
    fn generation_counts_and_shared_opacity() {
        let phi = tiny_field(4, 2);
        let psi = tiny_field(4, 3);
        let k = CameraIntrinsics::centered(16.0, 16, 12);
        let cfg = AugmentConfig {
            n_illumination: 2,
            n_color: 2,
            width: 8,
            height: 6,
            n_samples: 8,
            block_rows: 2,
            ..AugmentConfig::default()
        };
        let labels = sample_pose_labels(3, &cfg.pose_sampler, &k, &Aabb::cube(1.0), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let rep = generate_augmented_set(&phi, &psi, &labels, &k, &cfg, dir.path()).unwrap();
        assert_eq!(rep.samples.len(), 12);
        assert_eq!(rep.masks.len(), 3);
        assert!(rep.errors.is_empty());
        let lines = fs::read_to_string(&rep.manifest).unwrap().lines().count();
        assert_eq!(lines, 12);

        let mut rng = pose_rng(0, 0);
        let dist = fit_embedding_distribution(&phi.embeddings()).unwrap();
        let configs = draw_configs(&phi, &dist, &cfg, &mut rng).unwrap();
        let ks = k.scaled_to(8, 6);
        let r = render_pose(&phi, &psi, &labels[0], &ks, &configs, &cfg).unwrap();
        for x in &r.renders[1..] {
            assert_eq!(x.opacity, r.renders[0].opacity);
        }
        let m = crate::renderer::render_mask(&psi, &labels[0], &ks, &cfg.render_config()).unwrap();
        assert_eq!(m, r.mask);
    }
}
