use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use nerfaug::augment::{generate_augmented_set, load_pose_labels, sample_pose_labels, AugmentConfig};
use nerfaug::field::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use nerfaug::field::{FieldConfig, FieldParameters};
use nerfaug::geometry::{CameraIntrinsics, Pose};
use nerfaug::gradcheck::{check_gradients, standard_problem};
use nerfaug::io::image_io::{save_image, save_mask, ColorMode};
use nerfaug::io::manifest::{load_manifest, save_manifest, SceneManifest, Split, ViewRecord};
use nerfaug::io::toy::{generate_toy_scene, write_toy_scene, ToySceneSpec};
use nerfaug::renderer::{render_image, render_mask, Background, RenderConfig};
use nerfaug::training::{
    evaluate_psnr, preprocess, train_model, EvalView, LossRecord, TrainConfig, TrainMode,
};

#[derive(Parser)]
#[command(name = "nerfaug", version, about = "Radiance-field dataset augmentation")]
struct Cli {
    /// TOML file whose sections (`toy`, `field`, `train`, `render`, `augment`)
    /// override command-line flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log filter, e.g. `info` or `debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the procedural toy dataset with exact masks.
    ToyScene(ToySceneArgs),
    /// Apply masks and write the background-free training views.
    Preprocess(PreprocessArgs),
    /// Train an appearance or geometry field.
    Train(TrainArgs),
    /// Render one view from a checkpoint.
    Render(RenderArgs),
    /// Render a thresholded opacity mask.
    Mask(MaskArgs),
    /// Generate the augmented dataset.
    Augment(AugmentArgs),
    /// Mean PSNR of a checkpoint on a manifest split.
    EvalPsnr(EvalArgs),
    /// Finite-difference check of the analytic gradients.
    CheckGrads(CheckGradsArgs),
}

#[derive(Args)]
struct ToySceneArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_heldout: Option<usize>,
    #[arg(long)]
    rotation_noise_deg: Option<f64>,
    #[arg(long)]
    translation_noise: Option<f64>,
    #[arg(long)]
    light_jitter_deg: Option<f64>,
    #[arg(long)]
    color_mode: Option<ColorMode>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FieldFlags {
    #[arg(long)]
    grid_resolution: Option<usize>,
    #[arg(long)]
    grid_channels: Option<usize>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    sh_degree: Option<usize>,
    /// Start from the reduced toy-scene sizes instead of the full defaults.
    #[arg(long)]
    toy: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_parser = ["appearance", "geometry"])]
    mode: String,
    #[arg(long)]
    out: PathBuf,
    /// Appearance checkpoint whose pose corrections a geometry run consumes.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Also copy all weights from `--init` before training.
    #[arg(long)]
    warm_start: bool,
    /// Line-delimited JSON loss log.
    #[arg(long)]
    log_file: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[command(flatten)]
    field: FieldFlags,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr_grid: Option<f64>,
    #[arg(long)]
    lr_mlp: Option<f64>,
    #[arg(long)]
    lr_embedding: Option<f64>,
    #[arg(long)]
    lr_pose: Option<f64>,
    #[arg(long)]
    no_jitter: bool,
}

#[derive(Args)]
struct ViewFlags {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `w,x,y,z,tx,ty,tz`, world-from-camera.
    #[arg(long, allow_hyphen_values = true)]
    pose: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
    #[arg(long)]
    n_samples: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    view: ViewFlags,
    /// Training-image index, `mean`, or comma-separated values.
    #[arg(long, default_value = "mean", allow_hyphen_values = true)]
    embedding: String,
    #[arg(long)]
    background: Option<Background>,
    #[arg(long)]
    color_mode: Option<ColorMode>,
    /// Store the opacity as an alpha channel (premultiplied color is written).
    #[arg(long)]
    alpha: bool,
}

#[derive(Args)]
struct MaskArgs {
    #[command(flatten)]
    view: ViewFlags,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    appearance: PathBuf,
    #[arg(long)]
    geometry: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    n_labels: Option<usize>,
    #[arg(long)]
    n_illumination: Option<usize>,
    #[arg(long)]
    n_color: Option<usize>,
    #[arg(long)]
    weight_uniform: Option<f64>,
    #[arg(long)]
    weight_interpolate: Option<f64>,
    #[arg(long)]
    weight_extrapolate: Option<f64>,
    #[arg(long)]
    weight_gaussian: Option<f64>,
    #[arg(long)]
    extrapolation_range: Option<f64>,
    /// Comma-separated color-noise scales.
    #[arg(long, value_delimiter = ',')]
    color_scales: Option<Vec<f64>>,
    #[arg(long)]
    mask_threshold: Option<f64>,
    /// Background image; repeat for a pool.
    #[arg(long = "background")]
    background_pool: Vec<PathBuf>,
    #[arg(long)]
    background_probability: Option<f64>,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    color_mode: Option<ColorMode>,
    #[arg(long)]
    min_distance: Option<f64>,
    #[arg(long)]
    max_distance: Option<f64>,
    #[arg(long)]
    fill: Option<f64>,
    #[arg(long)]
    block_rows: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value = "heldout", value_parser = ["train", "heldout"])]
    split: String,
    #[arg(long)]
    n_samples: Option<usize>,
}

#[derive(Args)]
struct CheckGradsArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates per mode.
    #[arg(long, default_value_t = 100)]
    coords: usize,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Write the full report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Collects explicitly given flags as a (possibly nested) JSON object.
#[derive(Default)]
struct Flags(Map<String, Value>);

impl Flags {
    fn set<T: Serialize>(&mut self, key: &str, v: Option<T>) -> &mut Self {
        if let Some(v) = v {
            let mut parts: Vec<&str> = key.split('.').collect();
            let last = parts.pop().expect("non-empty key");
            let mut obj = &mut self.0;
            for p in parts {
                obj = obj
                    .entry(p)
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("nested flag object");
            }
            obj.insert(last.into(), serde_json::to_value(v).expect("flag serializes"));
        }
        self
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

/// Defaults, then flags, then the config-file section.
fn layered<T: Serialize + DeserializeOwned>(
    name: &str,
    defaults: T,
    flags: Flags,
    file: &Option<Value>,
) -> anyhow::Result<T> {
    let mut v = serde_json::to_value(defaults)?;
    merge(&mut v, Value::Object(flags.0));
    if let Some(section) = file.as_ref().and_then(|f| f.get(name)) {
        merge(&mut v, section.clone());
    }
    let cfg: T = serde_json::from_value(v.clone()).with_context(|| format!("invalid [{name}] config"))?;
    log::info!("effective {name} config: {}", serde_json::to_string(&cfg)?);
    Ok(cfg)
}

fn read_config_file(path: &Option<PathBuf>) -> anyhow::Result<Option<Value>> {
    let Some(path) = path else { return Ok(None) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(Some(serde_json::to_value(table)?))
}

fn parse_pose(s: &str) -> anyhow::Result<Pose> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .context("pose must be 7 comma-separated numbers")?;
    if v.len() != 7 {
        bail!("pose must have 7 values (w,x,y,z,tx,ty,tz), got {}", v.len());
    }
    Ok(Pose::from_wxyz([v[0], v[1], v[2], v[3]], [v[4], v[5], v[6]])?)
}

fn checkpoint_intrinsics(meta: &CheckpointMeta, w: Option<u32>, h: Option<u32>) -> anyhow::Result<CameraIntrinsics> {
    let k = meta
        .intrinsics
        .context("checkpoint does not record camera intrinsics")?;
    Ok(match (w, h) {
        (None, None) => k,
        (w, h) => k.scaled_to(w.unwrap_or(k.width), h.unwrap_or(k.height)),
    })
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    let file = read_config_file(&cli.config)?;
    match cli.command {
        Command::ToyScene(a) => toy_scene(a, &file),
        Command::Preprocess(a) => preprocess_cmd(a),
        Command::Train(a) => train(a, &file),
        Command::Render(a) => render(a, &file),
        Command::Mask(a) => mask(a, &file),
        Command::Augment(a) => augment(a, &file),
        Command::EvalPsnr(a) => eval_psnr(a, &file),
        Command::CheckGrads(a) => check_grads(a),
    }
}

fn toy_scene(a: ToySceneArgs, file: &Option<Value>) -> anyhow::Result<()> {
    let mut f = Flags::default();
    f.set("width", a.width)
        .set("height", a.height)
        .set("n_train", a.n_train)
        .set("n_heldout", a.n_heldout)
        .set("rotation_noise_deg", a.rotation_noise_deg)
        .set("translation_noise", a.translation_noise)
        .set("light_jitter_deg", a.light_jitter_deg)
        .set("color_mode", a.color_mode);
    let spec: ToySceneSpec = layered("toy", ToySceneSpec::default(), f, file)?;
    let seed = a.seed.unwrap_or(0);
    let scene = generate_toy_scene(&spec, seed)?;
    let path = write_toy_scene(&scene, &a.out)?;
    log::info!("wrote {} views to {}", scene.images.len(), path.display());
    Ok(())
}

fn preprocess_cmd(a: PreprocessArgs) -> anyhow::Result<()> {
    let m = load_manifest(&a.scene)?;
    let views = m.load_split(Split::Train)?;
    let ds = preprocess(&views.images, &views.poses, &views.masks, &m.intrinsics)?;
    let records: Vec<ViewRecord> = m.views_in(Split::Train).cloned().collect();
    let per = m.intrinsics.pixel_count();
    let mut out_views = Vec::new();
    for (k, rec) in records.iter().enumerate() {
        let mut img = views.images[k].clone();
        for (p, e) in img.pixels.iter_mut().zip(&ds.entries[k * per..(k + 1) * per]) {
            *p = e.pixel;
        }
        let image = PathBuf::from(format!("images/{k:04}.png"));
        let mask = PathBuf::from(format!("masks/{k:04}.png"));
        save_image(&img, ColorMode::Rgb, None, &a.out.join(&image))?;
        save_mask(&views.masks[k], &a.out.join(&mask))?;
        out_views.push(ViewRecord {
            image,
            mask: Some(mask),
            pose: rec.pose,
            split: Split::Train,
        });
    }
    let out = SceneManifest {
        views: out_views,
        base_dir: a.out.clone(),
        ..m
    };
    save_manifest(&out, &a.out.join("scene.jsonl"))?;
    log::info!("{} rays from {} images", ds.len(), records.len());
    Ok(())
}

fn train(a: TrainArgs, file: &Option<Value>) -> anyhow::Result<()> {
    let mode: TrainMode = a.mode.parse()?;
    let m = load_manifest(&a.scene)?;
    let views = m.load_split(Split::Train)?;
    let ds = preprocess(&views.images, &views.poses, &views.masks, &m.intrinsics)?;

    let base = if a.field.toy { FieldConfig::toy() } else { FieldConfig::default() };
    let mut f = Flags::default();
    f.set("grid_resolution", a.field.grid_resolution)
        .set("grid_channels", a.field.grid_channels)
        .set("embedding_dim", a.field.embedding_dim)
        .set("sh_degree", a.field.sh_degree);
    let mut field: FieldConfig = layered("field", base, f, file)?;
    field.n_images = views.images.len();
    field.bounds = m.bounds;

    let tbase = if a.field.toy { TrainConfig::toy() } else { TrainConfig::default() };
    let mut f = Flags::default();
    f.set("iterations", a.iterations)
        .set("batch_size", a.batch_size)
        .set("n_samples", a.n_samples)
        .set("seed", a.seed)
        .set("learning_rates.grid", a.lr_grid)
        .set("learning_rates.mlp", a.lr_mlp)
        .set("learning_rates.embedding", a.lr_embedding)
        .set("learning_rates.pose", a.lr_pose)
        .set("jitter", a.no_jitter.then_some(false));
    let cfg: TrainConfig = layered("train", tbase, f, file)?;

    let mut params = FieldParameters::initialized(field, cfg.seed)?;
    if let Some(init) = &a.init {
        let (src, _) = load_checkpoint(init)?;
        if a.warm_start {
            if src.config() != params.config() {
                bail!("--warm-start requires the same field config as {}", init.display());
            }
            params = src;
        } else {
            params.copy_pose_corrections_from(&src)?;
        }
    } else if mode == TrainMode::Geometry {
        log::warn!("geometry mode without --init: pose corrections stay at zero");
    }

    let mode_name = a.mode.clone();
    let meta_for = |it: Option<usize>| CheckpointMeta {
        mode: Some(mode_name.clone()),
        iteration: it,
        intrinsics: Some(m.intrinsics),
    };
    let mut log_out = match &a.log_file {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };
    let every = a.checkpoint_every.unwrap_or(0);
    let mut io_err: Option<anyhow::Error> = None;
    let mut observer = |rec: &LossRecord, p: &FieldParameters| {
        if let Some(w) = log_out.as_mut() {
            if let Err(e) = writeln!(w, "{}", json!(rec)) {
                io_err.get_or_insert(e.into());
            }
        }
        if rec.iteration.is_multiple_of(100) {
            log::info!(
                "it {} photo {:.5} density {:.5} psnr {:.2}",
                rec.iteration, rec.photometric, rec.density, rec.psnr
            );
        }
        if every > 0 && (rec.iteration + 1).is_multiple_of(every) {
            let path = a.out.with_extension(format!("{}.ckpt", rec.iteration + 1));
            if let Err(e) = save_checkpoint(p, &meta_for(Some(rec.iteration + 1)), &path) {
                io_err.get_or_insert(e.into());
            }
        }
    };
    let outcome = train_model(&ds, params, &cfg, mode, Some(&mut observer))?;
    if let Some(e) = io_err {
        return Err(e);
    }
    if let Some(mut w) = log_out {
        w.flush()?;
    }
    save_checkpoint(&outcome.params, &meta_for(Some(cfg.iterations)), &a.out)?;
    log::info!("saved {}", a.out.display());
    Ok(())
}

fn render_config(n_samples: Option<usize>, threshold: Option<f64>, bg: Option<Background>, file: &Option<Value>) -> anyhow::Result<RenderConfig> {
    let mut f = Flags::default();
    f.set("n_samples", n_samples)
        .set("mask_threshold", threshold)
        .set("background", bg);
    layered("render", RenderConfig::default(), f, file)
}

fn render(a: RenderArgs, file: &Option<Value>) -> anyhow::Result<()> {
    let (params, meta) = load_checkpoint(&a.view.checkpoint)?;
    let k = checkpoint_intrinsics(&meta, a.view.width, a.view.height)?;
    let pose = parse_pose(&a.view.pose)?;
    let emb: Vec<f64> = match a.embedding.as_str() {
        "mean" => params.mean_embedding(),
        s if !s.contains(',') && s.parse::<usize>().is_ok() => {
            let i: usize = s.parse()?;
            if i >= params.n_images() {
                bail!("embedding index {i} out of range ({} images)", params.n_images());
            }
            params.embedding(i).to_vec()
        }
        s => s
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .context("embedding must be an index, `mean`, or comma-separated values")?,
    };
    let cfg = render_config(a.view.n_samples, None, a.background, file)?;
    let out = render_image(&params, &pose, &k, &emb, &cfg)?;
    let mode = a.color_mode.unwrap_or_default();
    if a.alpha {
        let img = nerfaug::imaging::Image {
            width: out.width,
            height: out.height,
            pixels: out.color.clone(),
        };
        save_image(&img, mode, Some(&out.opacity), &a.view.out)?;
    } else {
        save_image(&out.to_image(cfg.background), mode, None, &a.view.out)?;
    }
    Ok(())
}

fn mask(a: MaskArgs, file: &Option<Value>) -> anyhow::Result<()> {
    let (params, meta) = load_checkpoint(&a.view.checkpoint)?;
    let k = checkpoint_intrinsics(&meta, a.view.width, a.view.height)?;
    let pose = parse_pose(&a.view.pose)?;
    let cfg = render_config(a.view.n_samples, a.threshold, None, file)?;
    save_mask(&render_mask(&params, &pose, &k, &cfg)?, &a.view.out)?;
    Ok(())
}

fn augment(a: AugmentArgs, file: &Option<Value>) -> anyhow::Result<()> {
    let mut f = Flags::default();
    f.set("n_labels", a.n_labels)
        .set("n_illumination", a.n_illumination)
        .set("n_color", a.n_color)
        .set("strategy_weights.uniform", a.weight_uniform)
        .set("strategy_weights.interpolate", a.weight_interpolate)
        .set("strategy_weights.extrapolate", a.weight_extrapolate)
        .set("strategy_weights.gaussian", a.weight_gaussian)
        .set("extrapolation_range", a.extrapolation_range)
        .set("color_scales", a.color_scales)
        .set("mask_threshold", a.mask_threshold)
        .set(
            "background_pool",
            (!a.background_pool.is_empty()).then_some(a.background_pool),
        )
        .set("background_probability", a.background_probability)
        .set("width", a.width)
        .set("height", a.height)
        .set("n_samples", a.n_samples)
        .set("color_mode", a.color_mode)
        .set("labels", a.labels)
        .set("pose_sampler.min_distance", a.min_distance)
        .set("pose_sampler.max_distance", a.max_distance)
        .set("pose_sampler.fill", a.fill)
        .set("block_rows", a.block_rows)
        .set("seed", a.seed);
    let cfg: AugmentConfig = layered("augment", AugmentConfig::default(), f, file)?;
    let (phi, meta) = load_checkpoint(&a.appearance)?;
    let (psi, _) = load_checkpoint(&a.geometry)?;
    let k = checkpoint_intrinsics(&meta, None, None)?;
    let labels = match &cfg.labels {
        Some(p) => {
            let mut l = load_pose_labels(p)?;
            if cfg.n_labels > 0 && cfg.n_labels < l.len() {
                l.truncate(cfg.n_labels);
            }
            l
        }
        None => sample_pose_labels(
            cfg.n_labels,
            &cfg.pose_sampler,
            &k.scaled_to(cfg.width, cfg.height),
            &phi.config().bounds,
            cfg.seed,
        )?,
    };
    let report = generate_augmented_set(&phi, &psi, &labels, &k, &cfg, &a.out)?;
    log::info!(
        "{} images, {} masks, {} errors; manifest {}",
        report.samples.len(),
        report.masks.len(),
        report.errors.len(),
        report.manifest.display()
    );
    Ok(())
}

fn eval_psnr(a: EvalArgs, file: &Option<Value>) -> anyhow::Result<()> {
    let (params, _) = load_checkpoint(&a.checkpoint)?;
    let m = load_manifest(&a.scene)?;
    let split = if a.split == "train" { Split::Train } else { Split::Heldout };
    let views = m.load_split(split)?;
    let eval: Vec<EvalView> = views
        .images
        .iter()
        .zip(&views.poses)
        .enumerate()
        .map(|(i, (image, pose))| EvalView {
            image,
            pose: *pose,
            trained_index: (split == Split::Train).then_some(i),
        })
        .collect();
    let cfg = render_config(a.n_samples, None, None, file)?;
    let psnr = evaluate_psnr(&params, &eval, &m.intrinsics, &cfg)?;
    println!("{psnr:.4}");
    Ok(())
}

fn check_grads(a: CheckGradsArgs) -> anyhow::Result<()> {
    let p = standard_problem(a.seed)?;
    let report = check_gradients(
        &p.params,
        &p.dataset,
        &p.indices,
        &p.cfg,
        &[TrainMode::Appearance, TrainMode::Geometry],
        a.coords,
        a.step,
        a.seed,
    )?;
    if let Some(path) = &a.report {
        fs::write(path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    println!(
        "{} coordinates, groups {:?}, max relative error {:.3e}",
        report.entries.len(),
        report.groups_covered(),
        report.max_relative_error
    );
    if report.max_relative_error >= a.tolerance {
        bail!("gradient check failed: {:.3e} >= {:.3e}", report.max_relative_error, a.tolerance);
    }
    Ok(())
}
