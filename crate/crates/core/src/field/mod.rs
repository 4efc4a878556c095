//! The radiance field: plane-grid position encoding, a density MLP, and a
//! color MLP conditioned on direction features and a per-image appearance
//! embedding.
//!
//! All learnable state lives in one flat `Vec<f64>` partitioned by
//! [`ParamLayout`]. Forward evaluation records a [`FieldTape`] that the
//! reverse pass consumes to produce exact gradients.

pub mod checkpoint;
pub mod encoding;
pub mod mlp;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, PoseCorrection, RaySample, Vec3};

pub use encoding::{DirectionEncoder, EncodedPosition, PlaneCell, PlaneGridEncoder};
pub use mlp::Mlp;

/// Architecture and sizing of one radiance field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub grid_resolution: usize,
    pub grid_channels: usize,
    pub density_hidden: Vec<usize>,
    /// Width of the density feature vector passed to the color branch.
    pub density_features: usize,
    pub color_hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub sh_degree: usize,
    /// Training images; sizes the embedding and pose-correction tables.
    pub n_images: usize,
    pub bounds: Aabb,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            grid_resolution: 128,
            grid_channels: 16,
            density_hidden: vec![64, 64],
            density_features: 15,
            color_hidden: vec![64, 64],
            embedding_dim: 16,
            sh_degree: 2,
            n_images: 0,
            bounds: Aabb::cube(1.0),
        }
    }
}

impl FieldConfig {
    /// Reduced sizes for the 64×64 toy scene on a CPU.
    pub fn toy() -> Self {
        FieldConfig {
            grid_resolution: 64,
            grid_channels: 8,
            density_hidden: vec![32],
            density_features: 15,
            color_hidden: vec![32],
            embedding_dim: 8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.grid_resolution < 2 {
            return bad("grid_resolution must be at least 2");
        }
        if self.grid_channels == 0 {
            return bad("grid_channels must be positive");
        }
        if self.density_hidden.contains(&0) || self.color_hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if self.sh_degree > DirectionEncoder::MAX_DEGREE {
            return bad("sh_degree must be at most 3");
        }
        Aabb::new(self.bounds.min, self.bounds.max)?;
        Ok(())
    }

    pub fn encoder(&self) -> PlaneGridEncoder {
        PlaneGridEncoder {
            resolution: self.grid_resolution,
            channels: self.grid_channels,
            bounds: self.bounds,
        }
    }

    pub fn direction_encoder(&self) -> DirectionEncoder {
        DirectionEncoder {
            degree: self.sh_degree,
        }
    }

    pub fn density_mlp(&self) -> Mlp {
        let mut dims = vec![3 * self.grid_channels];
        dims.extend(&self.density_hidden);
        dims.push(1 + self.density_features);
        Mlp::new(dims)
    }

    pub fn color_mlp(&self) -> Mlp {
        let sh = (self.sh_degree + 1) * (self.sh_degree + 1);
        let mut dims = vec![self.density_features + sh + self.embedding_dim];
        dims.extend(&self.color_hidden);
        dims.push(3);
        Mlp::new(dims)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Grid,
    DensityMlp,
    ColorMlp,
    Embedding,
    PoseCorrection,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Grid,
        ParamGroup::DensityMlp,
        ParamGroup::ColorMlp,
        ParamGroup::Embedding,
        ParamGroup::PoseCorrection,
    ];
}

/// Offsets of each parameter group inside the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub encoder: PlaneGridEncoder,
    pub direction: DirectionEncoder,
    pub density: Mlp,
    pub color: Mlp,
    pub grid: Range<usize>,
    pub density_params: Range<usize>,
    pub color_params: Range<usize>,
    pub embeddings: Range<usize>,
    pub pose_corrections: Range<usize>,
    pub embedding_dim: usize,
    pub density_features: usize,
}

impl ParamLayout {
    pub fn new(cfg: &FieldConfig) -> Self {
        let encoder = cfg.encoder();
        let density = cfg.density_mlp();
        let color = cfg.color_mlp();
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let grid = take(encoder.param_count());
        let density_params = take(density.param_count());
        let color_params = take(color.param_count());
        let embeddings = take(cfg.n_images * cfg.embedding_dim);
        let pose_corrections = take(cfg.n_images * 6);
        ParamLayout {
            encoder,
            direction: cfg.direction_encoder(),
            density,
            color,
            grid,
            density_params,
            color_params,
            embeddings,
            pose_corrections,
            embedding_dim: cfg.embedding_dim,
            density_features: cfg.density_features,
        }
    }

    pub fn total(&self) -> usize {
        self.pose_corrections.end
    }

    pub fn range(&self, group: ParamGroup) -> Range<usize> {
        match group {
            ParamGroup::Grid => self.grid.clone(),
            ParamGroup::DensityMlp => self.density_params.clone(),
            ParamGroup::ColorMlp => self.color_params.clone(),
            ParamGroup::Embedding => self.embeddings.clone(),
            ParamGroup::PoseCorrection => self.pose_corrections.clone(),
        }
    }

    pub fn group_of(&self, index: usize) -> ParamGroup {
        ParamGroup::ALL
            .into_iter()
            .find(|g| self.range(*g).contains(&index))
            .expect("index within layout")
    }

    pub fn sh_dim(&self) -> usize {
        self.direction.output_dim()
    }
}

/// All learnable state of one radiance field.
#[derive(Debug, Clone)]
pub struct FieldParameters {
    config: FieldConfig,
    layout: ParamLayout,
    values: Vec<f64>,
}

impl PartialEq for FieldParameters {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl FieldParameters {
    pub fn zeros(config: FieldConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let values = vec![0.0; layout.total()];
        Ok(FieldParameters {
            config,
            layout,
            values,
        })
    }

    /// Grids ~ U(-1e-4, 1e-4), Kaiming-uniform MLP weights, zero biases,
    /// zero embeddings and zero pose corrections.
    pub fn initialized(config: FieldConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut p.values[p.layout.grid.clone()] {
            *v = rng.random_range(-1e-4..1e-4);
        }
        let (d, c) = (p.layout.density_params.clone(), p.layout.color_params.clone());
        let density = p.layout.density.clone();
        let color = p.layout.color.clone();
        density.init(&mut p.values[d], &mut rng);
        color.init(&mut p.values[c], &mut rng);
        Ok(p)
    }

    pub fn from_flat(config: FieldConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if values.len() != layout.total() {
            return Err(Error::invalid(format!(
                "flat parameter vector has {} values, layout needs {}",
                values.len(),
                layout.total()
            )));
        }
        Ok(FieldParameters {
            config,
            layout,
            values,
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_images(&self) -> usize {
        self.config.n_images
    }

    pub fn group(&self, g: ParamGroup) -> &[f64] {
        &self.values[self.layout.range(g)]
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut [f64] {
        let r = self.layout.range(g);
        &mut self.values[r]
    }

    pub fn embedding(&self, image: usize) -> &[f64] {
        let d = self.layout.embedding_dim;
        let start = self.layout.embeddings.start + image * d;
        &self.values[start..start + d]
    }

    pub fn embeddings(&self) -> Vec<Vec<f64>> {
        (0..self.n_images()).map(|i| self.embedding(i).to_vec()).collect()
    }

    pub fn mean_embedding(&self) -> Vec<f64> {
        let d = self.layout.embedding_dim;
        let n = self.n_images();
        let mut mean = vec![0.0; d];
        if n == 0 {
            return mean;
        }
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(self.embedding(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        mean
    }

    pub fn pose_correction(&self, image: usize) -> PoseCorrection {
        let start = self.layout.pose_corrections.start + 6 * image;
        PoseCorrection::from_slice(&self.values[start..start + 6])
    }

    pub fn set_pose_correction(&mut self, image: usize, corr: &PoseCorrection) {
        let start = self.layout.pose_corrections.start + 6 * image;
        corr.write_to(&mut self.values[start..start + 6]);
    }

    /// Copies the pose-correction table of another field with the same image count.
    pub fn copy_pose_corrections_from(&mut self, other: &FieldParameters) -> Result<()> {
        if other.n_images() != self.n_images() {
            return Err(Error::invalid(format!(
                "pose tables differ in size: {} vs {}",
                other.n_images(),
                self.n_images()
            )));
        }
        let src = other.group(ParamGroup::PoseCorrection).to_vec();
        self.group_mut(ParamGroup::PoseCorrection).copy_from_slice(&src);
        Ok(())
    }

    /// Keeps every rotation delta in the principal branch.
    pub(crate) fn wrap_pose_corrections(&mut self) {
        for i in 0..self.n_images() {
            let c = self.pose_correction(i);
            if c.rotation.norm() >= std::f64::consts::PI {
                self.set_pose_correction(i, &c.principal());
            }
        }
    }

    pub fn grid(&self) -> &[f64] {
        &self.values[self.layout.grid.clone()]
    }

    pub fn density_params(&self) -> &[f64] {
        &self.values[self.layout.density_params.clone()]
    }

    pub fn color_params(&self) -> &[f64] {
        &self.values[self.layout.color_params.clone()]
    }

    pub fn encode_position(&self, p: &Vec3) -> EncodedPosition {
        self.layout.encoder.encode(self.grid(), p)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Density, color and density features at one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldOutput {
    pub sigma: f64,
    pub rgb: [f64; 3],
    pub density_features: Vec<f64>,
}

/// Where a sample's appearance embedding comes from.
#[derive(Debug, Clone, Copy)]
pub enum EmbeddingRef<'a> {
    /// Row of the learned table; receives gradients.
    Image(usize),
    /// Externally supplied vector; treated as a constant.
    Vector(&'a [f64]),
}

#[derive(Debug, Clone, Copy)]
pub struct FieldInput<'a> {
    pub position: Vec3,
    /// Unit view direction.
    pub direction: Vec3,
    pub embedding: EmbeddingRef<'a>,
}

/// Upstream gradient of the scalar loss with respect to one sample's outputs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OutputGrad {
    pub sigma: f64,
    pub rgb: [f64; 3],
}

/// Gradient with respect to one sample's inputs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct InputGrad {
    pub position: Vec3,
    pub direction: Vec3,
}

/// Density-branch result for one sample, reusable across colorings.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityEval {
    pub sigma: f64,
    pub features: Vec<f64>,
}

/// Activations recorded by a forward pass, consumed by [`FieldTape::backward`].
#[derive(Debug, Clone, Default)]
pub struct FieldTape {
    fingerprint: u64,
    len: usize,
    density_acts: Vec<f64>,
    color_acts: Vec<f64>,
    cells: Vec<[PlaneCell; 3]>,
    directions: Vec<Vec3>,
    embedding_rows: Vec<Option<usize>>,
    sigma_pre: Vec<f64>,
    sigma: Vec<f64>,
    rgb: Vec<[f64; 3]>,
    scratch: Vec<f64>,
    grad_in: Vec<f64>,
}

fn fingerprint(values: &[f64]) -> u64 {
    // cheap FNV-style mix of a few strided values plus the length
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ values.len() as u64;
    let step = (values.len() / 64).max(1);
    for v in values.iter().step_by(step) {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

impl FieldTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Starts a new recording against `params`.
    pub fn reset(&mut self, params: &FieldParameters) {
        self.fingerprint = fingerprint(&params.values);
        self.len = 0;
        self.density_acts.clear();
        self.color_acts.clear();
        self.cells.clear();
        self.directions.clear();
        self.embedding_rows.clear();
        self.sigma_pre.clear();
        self.sigma.clear();
        self.rgb.clear();
    }

    pub fn sigma(&self, k: usize) -> f64 {
        self.sigma[k]
    }

    pub fn rgb(&self, k: usize) -> [f64; 3] {
        self.rgb[k]
    }

    pub fn density_features(&self, params: &FieldParameters, k: usize) -> &[f64] {
        let l = &params.layout;
        let sd = l.density.activation_len();
        let acts = &self.density_acts[k * sd..(k + 1) * sd];
        &l.density.output(acts)[1..]
    }

    pub fn output(&self, params: &FieldParameters, k: usize) -> FieldOutput {
        FieldOutput {
            sigma: self.sigma[k],
            rgb: self.rgb[k],
            density_features: self.density_features(params, k).to_vec(),
        }
    }

    /// Evaluates one sample and appends its activations to the tape.
    pub fn push(&mut self, params: &FieldParameters, input: &FieldInput) -> Result<()> {
        let l = &params.layout;
        let emb: &[f64] = match input.embedding {
            EmbeddingRef::Image(i) => {
                if i >= params.n_images() {
                    return Err(Error::invalid(format!(
                        "image index {i} out of range for {} embeddings",
                        params.n_images()
                    )));
                }
                params.embedding(i)
            }
            EmbeddingRef::Vector(v) => v,
        };
        if emb.len() != l.embedding_dim {
            return Err(Error::invalid(format!(
                "embedding has dimension {}, field expects {}",
                emb.len(),
                l.embedding_dim
            )));
        }
        let sd = l.density.activation_len();
        let sc = l.color.activation_len();
        let d0 = self.density_acts.len();
        self.density_acts.resize(d0 + sd, 0.0);
        let c0 = self.color_acts.len();
        self.color_acts.resize(c0 + sc, 0.0);

        let dacts = &mut self.density_acts[d0..d0 + sd];
        let mut cells = [PlaneCell::default(); 3];
        let enc_dim = l.encoder.output_dim();
        l.encoder
            .encode_into(params.grid(), &input.position, &mut dacts[..enc_dim], &mut cells);
        l.density.forward(params.density_params(), dacts);
        let dout = l.density.output(dacts);
        let sigma_pre = dout[0];
        let f = l.density_features;

        let cacts = &mut self.color_acts[c0..c0 + sc];
        cacts[..f].copy_from_slice(&dout[1..]);
        let sh = l.sh_dim();
        l.direction.encode_into(&input.direction, &mut cacts[f..f + sh]);
        cacts[f + sh..f + sh + l.embedding_dim].copy_from_slice(emb);
        l.color.forward(params.color_params(), cacts);
        let logits = l.color.output(cacts);
        let rgb = [sigmoid(logits[0]), sigmoid(logits[1]), sigmoid(logits[2])];

        self.cells.push(cells);
        self.directions.push(input.direction);
        self.embedding_rows.push(match input.embedding {
            EmbeddingRef::Image(i) => Some(i),
            EmbeddingRef::Vector(_) => None,
        });
        self.sigma_pre.push(sigma_pre);
        self.sigma.push(softplus(sigma_pre));
        self.rgb.push(rgb);
        self.len += 1;
        Ok(())
    }

    /// Reverse pass: accumulates `∂L/∂params` into `grads` and returns the
    /// input gradient for every recorded sample.
    pub fn backward(
        &mut self,
        params: &FieldParameters,
        upstream: &[OutputGrad],
        grads: &mut [f64],
    ) -> Result<Vec<InputGrad>> {
        let mut out = vec![InputGrad::default(); upstream.len()];
        self.backward_into(params, upstream, grads, &mut out)?;
        Ok(out)
    }

    pub(crate) fn backward_into(
        &mut self,
        params: &FieldParameters,
        upstream: &[OutputGrad],
        grads: &mut [f64],
        input_grads: &mut [InputGrad],
    ) -> Result<()> {
        if upstream.len() != self.len {
            return Err(Error::Usage(format!(
                "backward received {} upstream gradients for a tape of {} samples",
                upstream.len(),
                self.len
            )));
        }
        if self.fingerprint != fingerprint(&params.values) {
            return Err(Error::Usage(
                "backward called with parameters that differ from the recorded forward pass"
                    .into(),
            ));
        }
        if grads.len() != params.len() {
            return Err(Error::Usage(format!(
                "gradient buffer has {} entries, parameters have {}",
                grads.len(),
                params.len()
            )));
        }
        let l = &params.layout;
        let sd = l.density.activation_len();
        let sc = l.color.activation_len();
        let f = l.density_features;
        let sh = l.sh_dim();
        let e = l.embedding_dim;
        let enc_dim = l.encoder.output_dim();
        self.grad_in.resize(l.color.input_dim().max(enc_dim), 0.0);
        let mut gdens = vec![0.0; 1 + f];

        for k in 0..self.len {
            let up = upstream[k];
            let mut ig = InputGrad::default();
            let cacts = &self.color_acts[k * sc..(k + 1) * sc];
            let dacts = &self.density_acts[k * sd..(k + 1) * sd];

            let rgb = self.rgb[k];
            let glog = [
                up.rgb[0] * rgb[0] * (1.0 - rgb[0]),
                up.rgb[1] * rgb[1] * (1.0 - rgb[1]),
                up.rgb[2] * rgb[2] * (1.0 - rgb[2]),
            ];
            gdens.fill(0.0);
            if glog.iter().any(|&g| g != 0.0) {
                let gin = &mut self.grad_in[..l.color.input_dim()];
                l.color.backward(
                    params.color_params(),
                    cacts,
                    &glog,
                    &mut grads[l.color_params.clone()],
                    Some(gin),
                    &mut self.scratch,
                );
                gdens[1..].copy_from_slice(&gin[..f]);
                ig.direction = l.direction.backward(&self.directions[k], &gin[f..f + sh]);
                if let Some(row) = self.embedding_rows[k] {
                    let start = l.embeddings.start + row * e;
                    for (g, v) in grads[start..start + e].iter_mut().zip(&gin[f + sh..f + sh + e]) {
                        *g += v;
                    }
                }
            }
            gdens[0] = up.sigma * sigmoid(self.sigma_pre[k]);
            if gdens.iter().any(|&g| g != 0.0) {
                let genc = &mut self.grad_in[..enc_dim];
                l.density.backward(
                    params.density_params(),
                    dacts,
                    &gdens,
                    &mut grads[l.density_params.clone()],
                    Some(genc),
                    &mut self.scratch,
                );
                ig.position = l.encoder.backward(
                    params.grid(),
                    &self.cells[k],
                    genc,
                    &mut grads[l.grid.clone()],
                );
            }
            input_grads[k] = ig;
        }
        Ok(())
    }
}

/// Batch forward pass with a recorded tape.
pub fn forward_batch(
    params: &FieldParameters,
    inputs: &[FieldInput],
) -> Result<(Vec<FieldOutput>, FieldTape)> {
    let mut tape = FieldTape::new();
    tape.reset(params);
    for input in inputs {
        tape.push(params, input)?;
    }
    let outs = (0..tape.len()).map(|k| tape.output(params, k)).collect();
    Ok((outs, tape))
}

/// Evaluates the field at one ray sample with an explicit embedding.
pub fn field_forward(
    params: &FieldParameters,
    sample: &RaySample,
    embedding: &[f64],
) -> Result<FieldOutput> {
    let input = FieldInput {
        position: sample.position,
        direction: crate::geometry::direction_from_angles(sample.theta, sample.phi),
        embedding: EmbeddingRef::Vector(embedding),
    };
    let (mut outs, _) = forward_batch(params, &[input])?;
    Ok(outs.pop().unwrap())
}

/// Density branch only: `(σ, F_σ)` at a position.
pub fn eval_density(params: &FieldParameters, position: &Vec3, acts: &mut Vec<f64>) -> f64 {
    let l = &params.layout;
    acts.resize(l.density.activation_len(), 0.0);
    let mut cells = [PlaneCell::default(); 3];
    let enc_dim = l.encoder.output_dim();
    l.encoder
        .encode_into(params.grid(), position, &mut acts[..enc_dim], &mut cells);
    l.density.forward(params.density_params(), acts);
    softplus(l.density.output(acts)[0])
}

/// Color branch only, with an explicit (possibly perturbed) color-MLP parameter slice.
pub fn eval_color(
    layout: &ParamLayout,
    color_params: &[f64],
    density_features: &[f64],
    direction_features: &[f64],
    embedding: &[f64],
    acts: &mut Vec<f64>,
) -> [f64; 3] {
    let f = layout.density_features;
    let sh = layout.sh_dim();
    acts.resize(layout.color.activation_len(), 0.0);
    acts[..f].copy_from_slice(density_features);
    acts[f..f + sh].copy_from_slice(direction_features);
    acts[f + sh..f + sh + layout.embedding_dim].copy_from_slice(embedding);
    layout.color.forward(color_params, acts);
    let o = layout.color.output(acts);
    [sigmoid(o[0]), sigmoid(o[1]), sigmoid(o[2])]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> FieldConfig {
        FieldConfig {
            grid_resolution: 6,
            grid_channels: 3,
            density_hidden: vec![8],
            density_features: 4,
            color_hidden: vec![8],
            embedding_dim: 3,
            sh_degree: 2,
            n_images: 3,
            bounds: Aabb::cube(1.0),
        }
    }

    fn sample_input(e: EmbeddingRef<'_>) -> FieldInput<'_> {
        FieldInput {
            position: Vec3::new(0.12, -0.33, 0.41),
            direction: Vec3::new(0.2, 0.3, -0.9).normalize(),
            embedding: e,
        }
    }

    #[test]
    fn layout_covers_all_parameters() {
        let cfg = tiny_config();
        let l = ParamLayout::new(&cfg);
        assert_eq!(l.grid.start, 0);
        assert_eq!(l.grid.end, l.density_params.start);
        assert_eq!(l.density_params.end, l.color_params.start);
        assert_eq!(l.color_params.end, l.embeddings.start);
        assert_eq!(l.embeddings.end, l.pose_corrections.start);
        assert_eq!(l.total(), 3 * 36 * 3 + (10 * 8 + 9 * 5) + (17 * 8 + 9 * 3) + 9 + 18);
        assert_eq!(l.group_of(0), ParamGroup::Grid);
        assert_eq!(l.group_of(l.total() - 1), ParamGroup::PoseCorrection);
    }

    #[test]
    fn initialization_contract() {
        let p = FieldParameters::initialized(tiny_config(), 1).unwrap();
        assert!(p.grid().iter().all(|v| v.abs() <= 1e-4));
        assert!(p.group(ParamGroup::Embedding).iter().all(|&v| v == 0.0));
        assert!(p.group(ParamGroup::PoseCorrection).iter().all(|&v| v == 0.0));
        assert!(p.density_params().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn flat_round_trip() {
        let p = FieldParameters::initialized(tiny_config(), 2).unwrap();
        let q = FieldParameters::from_flat(p.config().clone(), p.to_flat()).unwrap();
        assert_eq!(p, q);
        assert!(FieldParameters::from_flat(tiny_config(), vec![0.0; 3]).is_err());
    }

    #[test]
    fn zero_color_network_is_mid_gray() {
        let mut p = FieldParameters::initialized(tiny_config(), 3).unwrap();
        p.group_mut(ParamGroup::ColorMlp).fill(0.0);
        let out = forward_batch(&p, &[sample_input(EmbeddingRef::Image(1))]).unwrap().0;
        assert_eq!(out[0].rgb, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn embedding_only_affects_color() {
        let p = FieldParameters::initialized(tiny_config(), 4).unwrap();
        let ea = [0.5, -1.0, 2.0];
        let eb = [-3.0, 0.1, 0.7];
        let (a, _) = forward_batch(&p, &[sample_input(EmbeddingRef::Vector(&ea))]).unwrap();
        let (b, _) = forward_batch(&p, &[sample_input(EmbeddingRef::Vector(&eb))]).unwrap();
        assert_eq!(a[0].sigma.to_bits(), b[0].sigma.to_bits());
        assert_eq!(a[0].density_features, b[0].density_features);
        assert_ne!(a[0].rgb, b[0].rgb);
    }

    #[test]
    fn outputs_respect_activation_ranges() {
        let p = FieldParameters::initialized(tiny_config(), 5).unwrap();
        let (o, _) = forward_batch(&p, &[sample_input(EmbeddingRef::Image(0))]).unwrap();
        assert!(o[0].sigma >= 0.0);
        assert!(o[0].rgb.iter().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn backward_rejects_mismatched_tape() {
        let mut p = FieldParameters::initialized(tiny_config(), 6).unwrap();
        let (_, mut tape) = forward_batch(&p, &[sample_input(EmbeddingRef::Image(0))]).unwrap();
        let mut g = vec![0.0; p.len()];
        assert!(matches!(
            tape.backward(&p, &[], &mut g),
            Err(Error::Usage(_))
        ));
        p.values_mut()[0] += 1.0;
        assert!(matches!(
            tape.backward(&p, &[OutputGrad::default()], &mut g),
            Err(Error::Usage(_))
        ));
        let mut empty = FieldTape::new();
        assert!(empty.backward(&p, &[OutputGrad::default()], &mut g).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let p = FieldParameters::initialized(tiny_config(), 7).unwrap();
        let (_, mut tape) = forward_batch(&p, &[sample_input(EmbeddingRef::Image(2))]).unwrap();
        let mut g = vec![0.0; p.len()];
        tape.backward(&p, &[OutputGrad::default()], &mut g).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_embedding_dimension_rejected() {
        let p = FieldParameters::initialized(tiny_config(), 8).unwrap();
        let e = [1.0];
        assert!(forward_batch(&p, &[sample_input(EmbeddingRef::Vector(&e))]).is_err());
        assert!(forward_batch(&p, &[sample_input(EmbeddingRef::Image(3))]).is_err());
    }
}
