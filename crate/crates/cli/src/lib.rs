//! The `dnerf` command line: synthesize a scene, train on it, render
//! novel views and evaluate.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dnerf_core::camera::Camera;
use dnerf_core::data::checkpoint::Checkpoint;
use dnerf_core::data::synth::{synth_scene, GroundTruth, SyntheticSpec, TruthFile};
use dnerf_core::data::{load_dataset, SceneDataset};
use dnerf_core::fields::ArchConfig;
use dnerf_core::losses::DepthMode;
use dnerf_core::metrics::{masked_psnr, psnr, ssim, EvalReport, EvalRow};
use dnerf_core::optimize::{train, TrainConfig, Trainer, CHECKPOINT_FILE};
use dnerf_core::raster::Image;
use dnerf_core::view::{render_image, worker_count, FieldRenderer, RenderMode, ViewRenderer};

/// Ground-truth bundle written next to a synthetic dataset.
pub const TRUTH_FILE: &str = "truth.json";
/// Held-out view of a synthetic dataset: `time`, then a `poses.txt` style
/// camera (intrinsics, 12 pose values, near, far).
pub const HELD_OUT_VIEW: &str = "heldout/view.txt";
pub const HELD_OUT_IMAGE: &str = "heldout/image.png";
/// Per-iteration loss log of `train`, one JSON object per line.
pub const LOG_FILE: &str = "train.log";

#[derive(Debug, Parser)]
#[command(name = "dnerf", version, about = "Dynamic view synthesis from monocular video")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic translating-sphere dataset.
    Synth(SynthArgs),
    /// Train both fields on a dataset.
    Train(TrainArgs),
    /// Render one view from a checkpoint.
    Render(RenderArgs),
    /// Score renders against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub frames: usize,
    #[arg(long, default_value_t = 40)]
    pub width: usize,
    #[arg(long, default_value_t = 30)]
    pub height: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sphere displacement per frame, normalized units.
    #[arg(long, default_value_t = 0.03)]
    pub speed: f64,
    /// Camera arc in degrees; 0 keeps the camera still.
    #[arg(long, default_value_t = 10.0)]
    pub orbit: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    /// Depth 8, width 256.
    Full,
    /// Depth 4, width 64.
    Desk,
    /// Depth 2, width 16.
    Tiny,
}

impl Arch {
    pub fn config(self) -> ArchConfig {
        match self {
            Self::Full => ArchConfig::default(),
            Self::Desk => ArchConfig::desk(),
            Self::Tiny => ArchConfig::tiny(),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200_000)]
    pub iters: u64,
    #[arg(long, default_value_t = 1024)]
    pub rays: usize,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "order", value_parser = parse_depth_mode)]
    pub depth_mode: DepthMode,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Arch::Desk)]
    pub arch: Arch,
    #[arg(long, default_value_t = 1000)]
    pub checkpoint_every: u64,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// "fx fy cx cy" then the 12 row-major values of the camera-to-world
    /// matrix, world units.
    #[arg(long, allow_hyphen_values = true)]
    pub pose: String,
    #[arg(long)]
    pub time: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "full", value_parser = parse_mode)]
    pub mode: RenderMode,
    /// Output size; defaults to the training image size.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Views {
    /// Every training camera at its own time.
    Train,
    /// The first camera at every frame time (needs the ground-truth bundle).
    Fixed,
    /// The held-out camera of a synthetic dataset.
    Heldout,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    pub ckpt: Option<PathBuf>,
    /// Render with a ground-truth bundle instead of a checkpoint.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Views::Train)]
    pub views: Views,
    #[arg(long)]
    pub out: PathBuf,
    /// With `static`, PSNR only counts pixels outside the dynamic mask.
    #[arg(long, default_value = "full", value_parser = parse_mode)]
    pub mode: RenderMode,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
}

fn parse_depth_mode(s: &str) -> std::result::Result<DepthMode, String> {
    s.parse().map_err(|e: dnerf_core::Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<RenderMode, String> {
    s.parse().map_err(|e: dnerf_core::Error| e.to_string())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Render(a) => cmd_render(&a),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
    }
}

/// Camera line in the `poses.txt` layout without the leading index.
fn camera_line(cam: &Camera) -> String {
    let mut vals: Vec<f64> = cam.intrinsics().to_vec();
    vals.extend(cam.pose());
    vals.extend([cam.near, cam.far]);
    vals.iter().map(f64::to_string).collect::<Vec<_>>().join(" ")
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        frames: a.frames,
        width: a.width,
        height: a.height,
        speed: a.speed,
        orbit_degrees: a.orbit,
        ..SyntheticSpec::default()
    };
    let scene = synth_scene(&spec, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    scene.raw.save(&a.out)?;
    let truth_path = a.out.join(TRUTH_FILE);
    let json = serde_json::to_string_pretty(&scene.truth.to_file())?;
    fs::write(&truth_path, json).with_context(|| format!("{}", truth_path.display()))?;

    let truth = &scene.truth;
    let world = spec.camera_at(0.0)?;
    let view_path = a.out.join(HELD_OUT_VIEW);
    fs::create_dir_all(view_path.parent().expect("held-out view has a parent"))
        .with_context(|| format!("{}", view_path.display()))?;
    fs::write(&view_path, format!("{} {}\n", truth.held_out_time, camera_line(&world)))
        .with_context(|| format!("{}", view_path.display()))?;
    truth.image(&truth.held_out, truth.held_out_time, RenderMode::Full)?.save_png(&a.out.join(HELD_OUT_IMAGE))?;
    log::info!("wrote {} frames to {}", spec.frames, a.out.display());
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let dataset = load_dataset(&a.data)?;
    let mut config = TrainConfig {
        iterations: a.iters,
        rays: a.rays,
        samples: a.samples,
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
        depth_mode: a.depth_mode,
        arch: a.arch.config(),
        ..TrainConfig::default()
    };
    if let Some(lr) = a.lr {
        config.adam.lr = lr;
    }
    fs::create_dir_all(&a.out).with_context(|| format!("{}", a.out.display()))?;
    let log_path = a.out.join(LOG_FILE);
    let (mut trainer, log_file) = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path, None)?;
            let file = fs::OpenOptions::new().create(true).append(true).open(&log_path);
            (Trainer::resume(&dataset, config, ckpt)?, file)
        }
        None => (Trainer::new(&dataset, config)?, fs::File::create(&log_path)),
    };
    let mut log = BufWriter::new(log_file.with_context(|| format!("{}", log_path.display()))?);
    let start = trainer.iteration;
    train(&mut trainer, Some(&a.out), |report| {
        writeln!(log, "{}", report.to_line()).map_err(dnerf_core::error::io_err(&log_path))?;
        if report.iteration % 100 == 0 {
            log::info!("iteration {} loss {:.6}", report.iteration, report.total);
        }
        Ok(())
    })?;
    log.flush().with_context(|| format!("{}", log_path.display()))?;
    log::info!("trained iterations {start}..{}", trainer.iteration);
    Ok(())
}

/// Parses "fx fy cx cy" followed by 12 pose values.
pub fn parse_pose(s: &str) -> Result<([f64; 4], [f64; 12])> {
    let vals = s
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().with_context(|| format!("malformed pose: {t:?} is not a number")))
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != 16 {
        bail!("malformed pose: expected 16 numbers (fx fy cx cy + 12 pose values), got {}", vals.len());
    }
    if vals.iter().any(|v| !v.is_finite()) {
        bail!("malformed pose: values must be finite");
    }
    Ok((vals[..4].try_into().unwrap(), vals[4..].try_into().unwrap()))
}

pub fn cmd_render(a: &RenderArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt, None)?;
    let (intr, pose) = parse_pose(&a.pose)?;
    let scene = ckpt.scene;
    let width = a.width.unwrap_or(scene.width);
    let height = a.height.unwrap_or(scene.height);
    let world = Camera::from_pose(intr, &pose, width, height, scene.near, scene.far)?;
    let cam = scene.normalization.camera(&world)?;
    let renderer = FieldRenderer::new(ckpt.arch, ckpt.params, a.samples);
    let img = render_image(&renderer, &cam, a.time, a.mode, worker_count())?;
    img.save_png(&a.out)?;
    Ok(())
}

/// A renderer plus the ground truth bundle, when one is around.
fn eval_renderer(a: &EvalArgs, dataset: &SceneDataset) -> Result<Box<dyn ViewRenderer>> {
    if let Some(path) = &a.oracle {
        return Ok(Box::new(load_truth(path)?));
    }
    let path = a.ckpt.as_ref().expect("clap requires --ckpt or --oracle");
    let ckpt = Checkpoint::load(path, None)?;
    if (ckpt.scene.width, ckpt.scene.height) != (dataset.width, dataset.height) {
        log::warn!(
            "checkpoint was trained on {}x{} images, evaluating on {}x{}",
            ckpt.scene.width,
            ckpt.scene.height,
            dataset.width,
            dataset.height
        );
    }
    Ok(Box::new(FieldRenderer::new(ckpt.arch, ckpt.params, a.samples)))
}

fn load_truth(path: &Path) -> Result<GroundTruth> {
    let text = fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
    let file: TruthFile = serde_json::from_str(&text).with_context(|| format!("{}", path.display()))?;
    Ok(GroundTruth::from_file(file)?)
}

/// Reads the held-out view written by `synth`, normalized like `dataset`.
pub fn load_held_out(data: &Path, dataset: &SceneDataset) -> Result<(Camera, f64, Image)> {
    let path = data.join(HELD_OUT_VIEW);
    let text = fs::read_to_string(&path).with_context(|| format!("{}", path.display()))?;
    let vals = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .with_context(|| format!("{}: malformed view", path.display()))?;
    if vals.len() != 19 {
        bail!("{}: expected 19 values, got {}", path.display(), vals.len());
    }
    let world = Camera::from_pose(
        vals[1..5].try_into().unwrap(),
        &vals[5..17].try_into().unwrap(),
        dataset.width,
        dataset.height,
        vals[17],
        vals[18],
    )?;
    let image = Image::load_png(&data.join(HELD_OUT_IMAGE))?;
    Ok((dataset.normalization.camera(&world)?, vals[0], image))
}

/// Evaluates and writes the report table; also returns it.
pub fn cmd_eval(a: &EvalArgs) -> Result<EvalReport> {
    let dataset = load_dataset(&a.data)?;
    let renderer = eval_renderer(a, &dataset)?;
    let workers = worker_count();
    // (name, camera, time, target, static-pixel mask)
    let mut views: Vec<(String, Camera, f64, Image, Option<Vec<bool>>)> = Vec::new();
    match a.views {
        Views::Train => {
            for (i, f) in dataset.frames.iter().enumerate() {
                let keep = f.mask.iter().map(|&m| m == 0.0).collect();
                views.push((format!("frame_{i:04}"), f.camera.clone(), dataset.time(i), f.image.clone(), Some(keep)));
            }
        }
        Views::Fixed => {
            let truth = load_truth(&a.data.join(TRUTH_FILE))?;
            let cam = dataset.frames[0].camera.clone();
            for i in 0..dataset.len() {
                let t = dataset.time(i);
                let target = truth.image(&cam, t, RenderMode::Full)?;
                views.push((format!("fixed_t{i:04}"), cam.clone(), t, target, None));
            }
        }
        Views::Heldout => {
            let (cam, t, image) = load_held_out(&a.data, &dataset)?;
            views.push(("heldout".into(), cam, t, image, None));
        }
    }
    let mut report = EvalReport::default();
    for (view, cam, t, target, keep) in views {
        let img = render_image(renderer.as_ref(), &cam, t, a.mode, workers)?;
        let p = match (a.mode, keep) {
            (RenderMode::Static, Some(keep)) => masked_psnr(&img, &target, &keep)?,
            _ => psnr(&img, &target)?,
        };
        report.rows.push(EvalRow { view, psnr: p, ssim: ssim(&img, &target)? });
    }
    fs::write(&a.out, report.to_table()).with_context(|| format!("{}", a.out.display()))?;
    Ok(report)
}

/// Files a training run leaves behind.
pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join(CHECKPOINT_FILE)
}
