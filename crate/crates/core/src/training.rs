//! Ray dataset construction, losses and the optimization loop for both the
//! appearance field (photometric loss, learns pose corrections) and the
//! geometry field (photometric + mask-driven density loss, pose corrections
//! frozen).

use std::time::Instant;

use nalgebra::UnitQuaternion;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{EmbeddingRef, FieldInput, FieldParameters, FieldTape, InputGrad, OutputGrad, ParamGroup};
use crate::geometry::{
    apply_pose_correction, cast_ray, rotate_jacobian, stratified_depths, CameraIntrinsics, Pose,
    Ray, Vec3,
};
use crate::imaging::{psnr_from_mse, Image, Mask};
use crate::renderer::{compute_weights, composite_backward, ray_seed, render_image, Background, RenderConfig};

/// One training ray with its supervision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayDatasetEntry {
    pub origin: Vec3,
    pub direction: Vec3,
    /// Observed value with the background already removed.
    pub pixel: [f64; 3],
    pub mask: bool,
    pub image: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayDataset {
    pub entries: Vec<RayDatasetEntry>,
    pub n_images: usize,
    pub intrinsics: CameraIntrinsics,
}

impl RayDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The labelled (uncorrected) ray of entry `i`.
    pub fn ray(&self, i: usize) -> Ray {
        Ray {
            origin: self.entries[i].origin,
            direction: self.entries[i].direction,
        }
    }
}

/// Casts one ray per pixel and zeroes pixels outside each mask.
pub fn preprocess(
    images: &[Image],
    poses: &[Pose],
    masks: &[Mask],
    intrinsics: &CameraIntrinsics,
) -> Result<RayDataset> {
    intrinsics.validate()?;
    if images.len() != poses.len() || images.len() != masks.len() {
        return Err(Error::invalid(format!(
            "got {} images, {} poses and {} masks",
            images.len(),
            poses.len(),
            masks.len()
        )));
    }
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut entries = Vec::with_capacity(images.len() * intrinsics.pixel_count());
    for (a, ((img, pose), mask)) in images.iter().zip(poses).zip(masks).enumerate() {
        if img.width != w || img.height != h || mask.width != w || mask.height != h {
            return Err(Error::invalid(format!(
                "image {a} is {}x{} with a {}x{} mask, intrinsics expect {w}x{h}",
                img.width, img.height, mask.width, mask.height
            )));
        }
        for j in 0..h {
            for i in 0..w {
                let ray = cast_ray(pose, intrinsics, i, j);
                let m = mask.get(i, j);
                entries.push(RayDatasetEntry {
                    origin: ray.origin,
                    direction: ray.direction,
                    pixel: if m { img.get(i, j) } else { [0.0; 3] },
                    mask: m,
                    image: a as u32,
                });
            }
        }
    }
    Ok(RayDataset {
        entries,
        n_images: images.len(),
        intrinsics: *intrinsics,
    })
}

/// Mean squared error over the batch and channels.
pub fn photometric_loss(predicted: &[[f64; 3]], observed: &[[f64; 3]]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::invalid("photometric loss of an empty batch"));
    }
    if predicted.len() != observed.len() {
        return Err(Error::invalid(format!(
            "batch lengths differ: {} vs {}",
            predicted.len(),
            observed.len()
        )));
    }
    let sum: f64 = predicted
        .iter()
        .zip(observed)
        .map(|(p, o)| (0..3).map(|c| (p[c] - o[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (3 * predicted.len()) as f64)
}

/// Per-ray density penalty `Σₙ σₙ² (1 − m)`.
pub fn density_loss(sigmas: &[f64], mask: bool) -> f64 {
    if mask {
        0.0
    } else {
        sigmas.iter().map(|s| s * s).sum()
    }
}

/// Batch density loss: the per-ray penalty averaged over rays.
pub fn density_loss_batch(rays: &[(&[f64], bool)]) -> f64 {
    if rays.is_empty() {
        return 0.0;
    }
    rays.iter().map(|(s, m)| density_loss(s, *m)).sum::<f64>() / rays.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Photometric loss; learns pose corrections.
    Appearance,
    /// Photometric + density loss; pose corrections frozen.
    Geometry,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "appearance" => Ok(TrainMode::Appearance),
            "geometry" => Ok(TrainMode::Geometry),
            other => Err(Error::invalid(format!("unknown training mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub grid: f64,
    pub mlp: f64,
    pub embedding: f64,
    pub pose: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            grid: 1e-2,
            mlp: 1e-3,
            embedding: 1e-3,
            pose: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Rays per batch.
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rates: LearningRates,
    pub photometric_weight: f64,
    pub density_weight: f64,
    /// Samples per ray.
    pub n_samples: usize,
    /// Stratified jitter during training.
    pub jitter: bool,
    /// Geometry mode: composite prediction and target over a random
    /// per-ray gray background so foreground opacity is pinned to 1.
    pub random_background: bool,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4096,
            iterations: 30_000,
            learning_rates: LearningRates::default(),
            photometric_weight: 1.0,
            density_weight: 1.0,
            n_samples: 64,
            jitter: true,
            random_background: true,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-15,
        }
    }
}

impl TrainConfig {
    /// Budget for the 64×64 toy scene.
    pub fn toy() -> Self {
        TrainConfig {
            iterations: 3000,
            batch_size: 1024,
            n_samples: 32,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = &self.learning_rates;
        if [lr.grid, lr.mlp, lr.embedding, lr.pose]
            .iter()
            .any(|&v| !(v > 0.0 && v.is_finite()))
        {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.n_samples == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and n_samples must be positive".into(),
            ));
        }
        if self.photometric_weight < 0.0 || self.density_weight < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    fn group_lr(&self, group: ParamGroup, mode: TrainMode) -> f64 {
        let lr = &self.learning_rates;
        match group {
            ParamGroup::Grid => lr.grid,
            ParamGroup::DensityMlp | ParamGroup::ColorMlp => lr.mlp,
            ParamGroup::Embedding => lr.embedding,
            ParamGroup::PoseCorrection => match mode {
                TrainMode::Appearance => lr.pose,
                TrainMode::Geometry => 0.0,
            },
        }
    }
}

/// Adam with per-group learning rates over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// Applies one update. `lrs` pairs each group range with its step size;
    /// ranges with a zero step size are left untouched.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lrs: &[(std::ops::Range<usize>, f64)],
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (range, lr) in lrs {
            if *lr == 0.0 {
                continue;
            }
            let step = lr / bc1;
            for k in range.clone() {
                let g = grads[k];
                let m = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
                let v = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
                self.m[k] = m;
                self.v[k] = v;
                params[k] -= step * m / ((v / bc2).sqrt() + self.epsilon);
            }
        }
    }
}

/// Epoch-wise random permutation over dataset indices.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = BatchSampler {
            order: (0..n).collect(),
            cursor: 0,
            epoch: 0,
            seed,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        self.order.shuffle(&mut rng);
    }

    pub fn next_batch(&mut self, size: usize, out: &mut Vec<usize>) {
        out.clear();
        if self.order.is_empty() {
            return;
        }
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.cursor = 0;
                self.shuffle();
            }
            let take = (size - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
    }
}

/// Loss terms of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub photometric: f64,
    pub density: f64,
    /// Weighted sum that is actually differentiated.
    pub total: f64,
}

#[derive(Default)]
struct RayWorkspace {
    tape: FieldTape,
    depths: Vec<f64>,
    deltas: Vec<f64>,
    weights: Vec<f64>,
    transmittance: Vec<f64>,
    sigmas: Vec<f64>,
    rgbs: Vec<[f64; 3]>,
    g_sigma: Vec<f64>,
    g_rgb: Vec<[f64; 3]>,
    upstream: Vec<OutputGrad>,
    input_grads: Vec<InputGrad>,
}

struct RayLoss {
    photo_sq: f64,
    density: f64,
}

/// Forward and reverse pass for one training ray. Gradients of
/// `photo_scale·Σ(C−I)² + density_scale·Σσ²(1−m)` are accumulated into `grads`.
#[allow(clippy::too_many_arguments)]
fn ray_step(
    params: &FieldParameters,
    entry: &RayDatasetEntry,
    n_samples: usize,
    jitter_seed: Option<u64>,
    background: f64,
    photo_scale: f64,
    density_scale: f64,
    learn_pose: bool,
    ws: &mut RayWorkspace,
    grads: &mut [f64],
) -> Result<RayLoss> {
    let label_ray = Ray {
        origin: entry.origin,
        direction: entry.direction,
    };
    let target = if entry.mask {
        entry.pixel
    } else {
        entry.pixel.map(|p| p + background)
    };
    let Some((near, far)) = params.config().bounds.depth_range(&label_ray) else {
        let photo_sq = target.iter().map(|p| (background - p).powi(2)).sum();
        return Ok(RayLoss {
            photo_sq,
            density: 0.0,
        });
    };
    let img = entry.image as usize;
    let corr = params.pose_correction(img);
    let dq = UnitQuaternion::from_scaled_axis(corr.rotation);
    let origin = entry.origin + corr.translation;
    let direction = dq * entry.direction;

    match jitter_seed {
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            stratified_depths(near, far, n_samples, Some(&mut rng), &mut ws.depths, &mut ws.deltas)
        }
        None => stratified_depths::<ChaCha8Rng>(near, far, n_samples, None, &mut ws.depths, &mut ws.deltas),
    }

    ws.tape.reset(params);
    for &t in &ws.depths {
        ws.tape.push(
            params,
            &FieldInput {
                position: origin + direction * t,
                direction,
                embedding: EmbeddingRef::Image(img),
            },
        )?;
    }
    let n = ws.depths.len();
    ws.sigmas.clear();
    ws.rgbs.clear();
    for k in 0..n {
        ws.sigmas.push(ws.tape.sigma(k));
        ws.rgbs.push(ws.tape.rgb(k));
    }
    compute_weights(&ws.sigmas, &ws.deltas, &mut ws.weights, &mut ws.transmittance);
    let mut color = [0.0; 3];
    for (w, c) in ws.weights.iter().zip(&ws.rgbs) {
        for ch in 0..3 {
            color[ch] += w * c[ch];
        }
    }
    let residual = ws.transmittance[n];
    let mut photo_sq = 0.0;
    let mut g_color = [0.0; 3];
    let mut g_opacity = 0.0;
    for ch in 0..3 {
        let r = color[ch] + residual * background - target[ch];
        photo_sq += r * r;
        g_color[ch] = 2.0 * photo_scale * r;
        g_opacity -= g_color[ch] * background;
    }
    let density = density_loss(&ws.sigmas, entry.mask);

    ws.g_sigma.resize(n, 0.0);
    ws.g_rgb.resize(n, [0.0; 3]);
    composite_backward(
        &ws.deltas,
        &ws.rgbs,
        &ws.weights,
        &ws.transmittance,
        g_color,
        g_opacity,
        &mut ws.g_sigma,
        &mut ws.g_rgb,
    );
    ws.upstream.clear();
    for k in 0..n {
        let mut gs = ws.g_sigma[k];
        if !entry.mask && density_scale != 0.0 {
            gs += density_scale * 2.0 * ws.sigmas[k];
        }
        ws.upstream.push(OutputGrad {
            sigma: gs,
            rgb: ws.g_rgb[k],
        });
    }
    ws.input_grads.resize(n, InputGrad::default());
    ws.tape
        .backward_into(params, &ws.upstream, grads, &mut ws.input_grads)?;

    if learn_pose {
        let mut g_origin = Vec3::zeros();
        let mut g_dir = Vec3::zeros();
        for (k, ig) in ws.input_grads.iter().enumerate() {
            g_origin += ig.position;
            g_dir += ig.position * ws.depths[k] + ig.direction;
        }
        let jac = rotate_jacobian(&corr.rotation, &entry.direction);
        let g_rot = jac.transpose() * g_dir;
        let start = params.layout().pose_corrections.start + 6 * img;
        for a in 0..3 {
            grads[start + a] += g_rot[a];
            grads[start + 3 + a] += g_origin[a];
        }
    }
    Ok(RayLoss { photo_sq, density })
}

/// Loss and exact gradient of a batch of rays.
///
/// The differentiated objective is
/// `w_photo·mean(‖C−I‖²)/3 + w_σ·mean(Σσ²(1−m))`, where the density term is
/// only active in geometry mode. Pose-correction gradients are produced only
/// in appearance mode.
///
/// `batch_seed` drives stratified jitter (if enabled) and, in geometry mode,
/// the random background `b`: prediction and target become `C + (1−O)·b` and
/// `I + (1−m)·b`. `None` means bin midpoints and a black background.
pub fn batch_loss_and_grad(
    params: &FieldParameters,
    dataset: &RayDataset,
    indices: &[usize],
    cfg: &TrainConfig,
    mode: TrainMode,
    batch_seed: Option<u64>,
) -> Result<(BatchLoss, Vec<f64>)> {
    if indices.is_empty() {
        return Err(Error::invalid("empty ray batch"));
    }
    let b = indices.len() as f64;
    let photo_scale = cfg.photometric_weight / (3.0 * b);
    let density_scale = match mode {
        TrainMode::Appearance => 0.0,
        TrainMode::Geometry => cfg.density_weight / b,
    };
    let learn_pose = mode == TrainMode::Appearance;
    let random_background = cfg.random_background && mode == TrainMode::Geometry;
    let n_params = params.len();

    // Fixed-size chunks summed in order keep results independent of the
    // thread count and of work stealing.
    let partials = indices
        .par_chunks(RAY_CHUNK)
        .map(|idx| -> Result<(f64, f64, Vec<f64>)> {
            let mut ws = RayWorkspace::default();
            let mut grads = vec![0.0; n_params];
            let (mut p, mut d) = (0.0, 0.0);
            for &i in idx {
                let seed = batch_seed.map(|s| ray_seed(s, i as u64));
                let jitter = seed.filter(|_| cfg.jitter);
                let background = match seed {
                    Some(s) if random_background => {
                        ChaCha8Rng::seed_from_u64(s ^ 0xB4C6_0F1E).random::<f64>()
                    }
                    _ => 0.0,
                };
                let l = ray_step(
                    params,
                    &dataset.entries[i],
                    cfg.n_samples,
                    jitter,
                    background,
                    photo_scale,
                    density_scale,
                    learn_pose,
                    &mut ws,
                    &mut grads,
                )?;
                p += l.photo_sq;
                d += l.density;
            }
            Ok((p, d, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut partials = partials.into_iter();
    let (mut photo_sq, mut density, mut grads) = partials.next().expect("non-empty batch");
    for (p, d, g) in partials {
        photo_sq += p;
        density += d;
        grads.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
    }

    let photometric = photo_sq / (3.0 * b);
    let density = density / b;
    let total = cfg.photometric_weight * photometric
        + match mode {
            TrainMode::Appearance => 0.0,
            TrainMode::Geometry => cfg.density_weight * density,
        };
    Ok((
        BatchLoss {
            photometric,
            density,
            total,
        },
        grads,
    ))
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub photometric: f64,
    pub density: f64,
    pub total: f64,
    /// PSNR of the batch photometric error.
    pub psnr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: FieldParameters,
    pub history: Vec<LossRecord>,
}

const MAX_NON_FINITE_BATCHES: usize = 3;
const RAY_CHUNK: usize = 256;

/// Optimizes `init` on `dataset`. In geometry mode the pose-correction table
/// of `init` is used as a fixed input and returned unchanged.
pub fn train_model(
    dataset: &RayDataset,
    init: FieldParameters,
    cfg: &TrainConfig,
    mode: TrainMode,
    mut observer: Option<&mut dyn FnMut(&LossRecord, &FieldParameters)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("empty ray dataset"));
    }
    if dataset.n_images > init.n_images() {
        return Err(Error::invalid(format!(
            "dataset has {} images but the field only has {} embeddings",
            dataset.n_images,
            init.n_images()
        )));
    }
    let mut params = init;
    let layout = params.layout().clone();
    let lrs: Vec<_> = ParamGroup::ALL
        .iter()
        .map(|&g| (layout.range(g), cfg.group_lr(g, mode)))
        .collect();
    let mut adam = Adam::new(params.len(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
    let mut sampler = BatchSampler::new(dataset.len(), cfg.seed);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.iterations);
    let start = Instant::now();
    let mut non_finite = 0;

    for it in 0..cfg.iterations {
        sampler.next_batch(cfg.batch_size.min(dataset.len()), &mut batch);
        let batch_seed = cfg.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ it as u64;
        let (loss, grads) =
            batch_loss_and_grad(&params, dataset, &batch, cfg, mode, Some(batch_seed))?;
        if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            non_finite += 1;
            log::warn!("non-finite loss at iteration {it}: {loss:?}");
            if non_finite >= MAX_NON_FINITE_BATCHES {
                return Err(Error::Diverged {
                    iteration: it,
                    message: format!("{MAX_NON_FINITE_BATCHES} consecutive non-finite batches"),
                });
            }
            continue;
        }
        non_finite = 0;
        adam.step(params.values_mut(), &grads, &lrs);
        if mode == TrainMode::Appearance {
            params.wrap_pose_corrections();
        }
        let rec = LossRecord {
            iteration: it,
            photometric: loss.photometric,
            density: loss.density,
            total: loss.total,
            psnr: psnr_from_mse(loss.photometric),
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(obs) = observer.as_deref_mut() {
            obs(&rec, &params);
        }
        history.push(rec);
    }
    Ok(TrainOutcome { params, history })
}

/// A view used for PSNR evaluation.
#[derive(Debug, Clone, Copy)]
pub struct EvalView<'a> {
    pub image: &'a Image,
    pub pose: Pose,
    /// Index of the image in the training set, if it was trained on.
    pub trained_index: Option<usize>,
}

/// Mean PSNR over views. Trained views use their own embedding and learned
/// pose correction; other views use the mean embedding and the given pose.
pub fn evaluate_psnr(
    params: &FieldParameters,
    views: &[EvalView],
    intrinsics: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> Result<f64> {
    if views.is_empty() {
        return Err(Error::invalid("no views to evaluate"));
    }
    let mean = params.mean_embedding();
    let mut total = 0.0;
    for v in views {
        let (pose, emb) = match v.trained_index {
            Some(i) => (
                apply_pose_correction(&v.pose, &params.pose_correction(i)),
                params.embedding(i).to_vec(),
            ),
            None => (v.pose, mean.clone()),
        };
        let out = render_image(params, &pose, intrinsics, &emb, cfg)?;
        let mse = out.to_image(Background::Black).mse(v.image)?;
        total += psnr_from_mse(mse);
    }
    Ok(total / views.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use crate::geometry::Aabb;

    #[test]
    fn preprocess_counts_and_masking() {
        let k = CameraIntrinsics::centered(4.0, 4, 4);
        let img = Image::filled(4, 4, [0.7, 0.2, 0.1]);
        let poses = [Pose::identity(), Pose::identity()];
        let ones = Mask::filled(4, 4, true);
        let zeros = Mask::filled(4, 4, false);
        let ds = preprocess(&[img.clone(), img.clone()], &poses, &[ones, zeros], &k).unwrap();
        assert_eq!(ds.len(), 32);
        assert!(ds.entries[..16].iter().all(|e| e.pixel == [0.7, 0.2, 0.1] && e.mask));
        assert!(ds.entries[16..].iter().all(|e| e.pixel == [0.0; 3] && !e.mask));
        assert!(ds.entries[16..].iter().all(|e| e.image == 1));
    }

    #[test]
    fn preprocess_rejects_mismatch() {
        let k = CameraIntrinsics::centered(4.0, 4, 4);
        let img = Image::new(4, 4);
        let m = Mask::new(4, 4);
        assert!(preprocess(std::slice::from_ref(&img), &[], std::slice::from_ref(&m), &k).is_err());
        assert!(preprocess(&[Image::new(3, 4)], &[Pose::identity()], &[m], &k).is_err());
    }

    #[test]
    fn photometric_loss_cases() {
        let a = [[0.2, 0.4, 0.6]; 3];
        assert_eq!(photometric_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(photometric_loss(&[[0.0; 3]; 2], &[[1.0; 3]; 2]).unwrap(), 1.0);
        assert_eq!(photometric_loss(&[[0.5; 3]], &[[0.25; 3]]).unwrap(), 0.0625);
        assert!(photometric_loss(&[], &[]).is_err());
        assert!(photometric_loss(&[[0.0; 3]], &[]).is_err());
    }

    #[test]
    fn density_loss_cases() {
        assert_eq!(density_loss(&[3.0, 9.0], true), 0.0);
        assert_eq!(density_loss(&[1.0, 2.0], false), 5.0);
        assert_eq!(density_loss(&[0.0, 0.0, 0.0], false), 0.0);
        let a = [1.0, 2.0];
        let b = [4.0];
        assert_eq!(density_loss_batch(&[(&a, false), (&b, true)]), 2.5);
    }

    #[test]
    fn zero_learning_rate_step_is_identity() {
        let mut adam = Adam::new(4, 0.9, 0.999, 1e-15);
        let mut p = vec![1.0, -0.0, 3.5, f64::MIN_POSITIVE];
        let before = p.clone();
        adam.step(&mut p, &[0.3, -2.0, 1e9, 0.0], &[(0..4, 0.0)]);
        assert!(p.iter().zip(&before).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut adam = Adam::new(2, 0.9, 0.999, 1e-15);
        let mut p = vec![0.0, 0.0];
        adam.step(&mut p, &[1.0, -1.0], &[(0..2, 0.1)]);
        assert!((p[0] + 0.1).abs() < 1e-12);
        assert!((p[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn sampler_visits_each_entry_once_per_epoch() {
        let mut s = BatchSampler::new(103, 7);
        let mut seen = Vec::new();
        let mut b = Vec::new();
        while seen.len() < 103 {
            s.next_batch(10, &mut b);
            seen.extend_from_slice(&b);
        }
        let mut first: Vec<_> = seen[..103].to_vec();
        first.sort();
        assert_eq!(first, (0..103).collect::<Vec<_>>());
        // second epoch is a different permutation
        while seen.len() < 206 {
            s.next_batch(10, &mut b);
            seen.extend_from_slice(&b);
        }
        let mut second: Vec<_> = seen[103..206].to_vec();
        assert_ne!(&seen[..103], &second[..]);
        second.sort();
        assert_eq!(second, (0..103).collect::<Vec<_>>());
    }

    fn tiny_dataset() -> (RayDataset, FieldParameters) {
        let k = CameraIntrinsics::centered(6.0, 6, 6);
        let poses = [
            Pose::look_at(Vec3::new(0.0, -3.0, 0.2), Vec3::zeros(), Vec3::z()),
            Pose::look_at(Vec3::new(3.0, 0.3, 0.0), Vec3::zeros(), Vec3::z()),
        ];
        let mut img = Image::new(6, 6);
        for j in 0..6 {
            for i in 0..6 {
                img.set(i, j, [i as f64 / 6.0, j as f64 / 6.0, 0.5]);
            }
        }
        let mut mask = Mask::filled(6, 6, true);
        mask.data[0] = false;
        mask.data[7] = false;
        let ds = preprocess(&[img.clone(), img], &poses, &[mask.clone(), mask], &k).unwrap();
        let cfg = FieldConfig {
            grid_resolution: 5,
            grid_channels: 2,
            density_hidden: vec![6],
            density_features: 3,
            color_hidden: vec![5],
            embedding_dim: 2,
            sh_degree: 1,
            n_images: 2,
            bounds: Aabb::cube(1.0),
        };
        (ds, FieldParameters::initialized(cfg, 3).unwrap())
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let (ds, p) = tiny_dataset();
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::toy()
        };
        let out = train_model(&ds, p.clone(), &cfg, TrainMode::Appearance, None).unwrap();
        assert_eq!(out.params, p);
        assert!(out.history.is_empty());
    }

    #[test]
    fn geometry_mode_freezes_pose_corrections() {
        let (ds, mut p) = tiny_dataset();
        let mut corr = crate::geometry::PoseCorrection::zero();
        corr.rotation = Vec3::new(0.01, -0.02, 0.005);
        corr.translation = Vec3::new(0.03, 0.0, -0.01);
        p.set_pose_correction(1, &corr);
        let cfg = TrainConfig {
            iterations: 3,
            batch_size: 16,
            n_samples: 8,
            ..TrainConfig::toy()
        };
        let before = p.group(ParamGroup::PoseCorrection).to_vec();
        let out = train_model(&ds, p, &cfg, TrainMode::Geometry, None).unwrap();
        let after = out.params.group(ParamGroup::PoseCorrection);
        assert!(before.iter().zip(after).all(|(a, b)| a.to_bits() == b.to_bits()));
        let out = train_model(&ds, out.params, &cfg, TrainMode::Appearance, None).unwrap();
        assert_ne!(out.params.group(ParamGroup::PoseCorrection), &before[..]);
    }

    #[test]
    fn geometry_loss_is_unit_weighted_sum() {
        let (ds, p) = tiny_dataset();
        let cfg = TrainConfig {
            n_samples: 8,
            ..TrainConfig::toy()
        };
        let idx: Vec<usize> = (0..ds.len()).collect();
        let (l, _) = batch_loss_and_grad(&p, &ds, &idx, &cfg, TrainMode::Geometry, None).unwrap();
        assert!(l.density > 0.0);
        assert_eq!(l.total, l.photometric + l.density);
        let (a, _) = batch_loss_and_grad(&p, &ds, &idx, &cfg, TrainMode::Appearance, None).unwrap();
        assert_eq!(a.total, a.photometric);
        assert_eq!(a.photometric, l.photometric);
    }

    #[test]
    fn zero_loss_gives_zero_gradient() {
        let (ds, p) = tiny_dataset();
        let cfg = TrainConfig {
            n_samples: 4,
            photometric_weight: 0.0,
            density_weight: 0.0,
            ..TrainConfig::toy()
        };
        let idx: Vec<usize> = (0..ds.len()).collect();
        let (l, g) = batch_loss_and_grad(&p, &ds, &idx, &cfg, TrainMode::Geometry, Some(1)).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn absent_image_gets_no_embedding_gradient() {
        let (ds, p) = tiny_dataset();
        let cfg = TrainConfig {
            n_samples: 8,
            ..TrainConfig::toy()
        };
        // rays of image 0 only
        let idx: Vec<usize> = (0..36).collect();
        let (_, g) = batch_loss_and_grad(&p, &ds, &idx, &cfg, TrainMode::Appearance, None).unwrap();
        let d = p.layout().embedding_dim;
        let e1 = p.layout().embeddings.start + d;
        assert!(g[e1..e1 + d].iter().all(|&v| v == 0.0));
        assert!(g[e1 - d..e1].iter().any(|&v| v != 0.0));
        let pc1 = p.layout().pose_corrections.start + 6;
        assert!(g[pc1..pc1 + 6].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("geometry".parse::<TrainMode>().unwrap(), TrainMode::Geometry);
        assert!("other".parse::<TrainMode>().is_err());
    }
}
