//! Central finite-difference check of the analytic batch gradient.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldParameters, ParamGroup};
use crate::geometry::{Aabb, PoseCorrection, Vec3};
use crate::io::toy::{generate_toy_scene, ToySceneSpec};
use crate::training::{batch_loss_and_grad, preprocess, RayDataset, TrainConfig, TrainMode};

/// Magnitude below which gradients are compared absolutely rather than
/// relatively.
pub const GRADIENT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub index: usize,
    pub group: ParamGroup,
    pub mode: &'static str,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_relative_error: f64,
}

impl GradCheckReport {
    pub fn groups_covered(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .filter(|g| self.entries.iter().any(|e| e.group == *g))
            .collect()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(GRADIENT_FLOOR);
    (a - b).abs() / scale
}

/// Checks `n_coords` coordinates per mode. Appearance mode covers every
/// group; geometry mode covers all but the frozen pose corrections. Within a
/// group, coordinates with a non-negligible analytic gradient are preferred.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients(
    params: &FieldParameters,
    dataset: &RayDataset,
    indices: &[usize],
    cfg: &TrainConfig,
    modes: &[TrainMode],
    n_coords: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch_seed = Some(seed);
    let mut entries = Vec::new();
    for &mode in modes {
        let (_, grads) = batch_loss_and_grad(params, dataset, indices, cfg, mode, batch_seed)?;
        let groups: Vec<ParamGroup> = ParamGroup::ALL
            .into_iter()
            .filter(|g| !(mode == TrainMode::Geometry && *g == ParamGroup::PoseCorrection))
            .filter(|g| !params.layout().range(*g).is_empty())
            .collect();
        let mut picked = Vec::new();
        for (k, g) in groups.iter().enumerate() {
            let quota = n_coords / groups.len() + usize::from(k < n_coords % groups.len());
            let range = params.layout().range(*g);
            let mut live: Vec<usize> = range.clone().filter(|&i| grads[i].abs() > 1e-4).collect();
            live.shuffle(&mut rng);
            let mut chosen: Vec<usize> = live.into_iter().take(quota).collect();
            while chosen.len() < quota {
                chosen.push(rng.random_range(range.clone()));
            }
            picked.extend(chosen.into_iter().map(|i| (i, *g)));
        }
        let mut probe = params.clone();
        for (i, group) in picked {
            let orig = probe.values()[i];
            probe.values_mut()[i] = orig + step;
            let (lp, _) = batch_loss_and_grad(&probe, dataset, indices, cfg, mode, batch_seed)?;
            probe.values_mut()[i] = orig - step;
            let (lm, _) = batch_loss_and_grad(&probe, dataset, indices, cfg, mode, batch_seed)?;
            probe.values_mut()[i] = orig;
            let numeric = (lp.total - lm.total) / (2.0 * step);
            entries.push(GradCheckEntry {
                index: i,
                group,
                mode: match mode {
                    TrainMode::Appearance => "appearance",
                    TrainMode::Geometry => "geometry",
                },
                analytic: grads[i],
                numeric,
                relative_error: relative_error(grads[i], numeric),
            });
        }
    }
    let max_relative_error = entries.iter().map(|e| e.relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        max_relative_error,
    })
}

/// Small randomized problem for [`check_gradients`]: a tiny toy scene with
/// label noise, a field with random grids, embeddings and pose corrections.
pub struct GradCheckProblem {
    pub params: FieldParameters,
    pub dataset: RayDataset,
    pub indices: Vec<usize>,
    pub cfg: TrainConfig,
}

pub fn standard_problem(seed: u64) -> Result<GradCheckProblem> {
    let spec = ToySceneSpec {
        width: 12,
        height: 12,
        n_train: 3,
        n_heldout: 0,
        rotation_noise_deg: 2.0,
        translation_noise: 0.05,
        ..ToySceneSpec::default()
    };
    let scene = generate_toy_scene(&spec, seed)?;
    let dataset = preprocess(&scene.images, &scene.label_poses, &scene.masks, &scene.intrinsics)?;
    let field = FieldConfig {
        grid_resolution: 8,
        grid_channels: 3,
        density_hidden: vec![12],
        density_features: 5,
        color_hidden: vec![12],
        embedding_dim: 4,
        sh_degree: 2,
        n_images: 3,
        bounds: Aabb::cube(1.0),
    };
    let mut params = FieldParameters::initialized(field, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    for g in [ParamGroup::Grid, ParamGroup::Embedding] {
        for v in params.group_mut(g) {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    for i in 0..3 {
        let c = PoseCorrection {
            rotation: Vec3::from_fn(|_, _| rng.random_range(-0.03..0.03)),
            translation: Vec3::from_fn(|_, _| rng.random_range(-0.05..0.05)),
        };
        params.set_pose_correction(i, &c);
    }
    // Rays through the object, both foreground and background.
    let mut indices: Vec<usize> = (0..dataset.len())
        .filter(|&i| params.config().bounds.depth_range(&dataset.ray(i)).is_some())
        .collect();
    indices.shuffle(&mut rng);
    indices.truncate(24);
    let cfg = TrainConfig {
        n_samples: 16,
        ..TrainConfig::default()
    };
    Ok(GradCheckProblem {
        params,
        dataset,
        indices,
        cfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!(relative_error(1e-9, 2e-9) < 1e-2);
    }

    #[test]
    fn small_check_passes() {
        let p = standard_problem(3).unwrap();
        let r = check_gradients(
            &p.params,
            &p.dataset,
            &p.indices,
            &p.cfg,
            &[TrainMode::Appearance, TrainMode::Geometry],
            10,
            1e-6,
            1,
        )
        .unwrap();
        assert_eq!(r.entries.len(), 20);
        assert_eq!(r.groups_covered().len(), 5);
        assert!(r.max_relative_error < 1e-4, "{:#?}", r.entries);
    }
}
