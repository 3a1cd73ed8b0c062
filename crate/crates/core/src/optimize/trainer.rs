use std::path::Path;

use dnerf_autodiff::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::objective::{objective, sample_batch, ObjectiveConfig};
use crate::data::checkpoint::{Checkpoint, SceneInfo};
use crate::data::SceneDataset;
use crate::error::{Error, Result};
use crate::fields::{init_params, ArchConfig, FieldParams};
use crate::losses::{DepthMode, LossReport, LossWeights};
use crate::metrics::psnr;
use crate::view::{render_image, FieldRenderer, RenderMode};

/// Learning rate as a function of the iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr · factor^(iteration / decay_steps)`.
    Exponential { decay_steps: u64, factor: f64 },
}

impl LrSchedule {
    pub fn lr(&self, base: f64, iteration: u64) -> f64 {
        match *self {
            Self::Constant => base,
            Self::Exponential { decay_steps, factor } => base * factor.powf(iteration as f64 / decay_steps.max(1) as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total iterations, counted from initialization.
    pub iterations: u64,
    pub rays: usize,
    pub samples: usize,
    pub seed: u64,
    /// Checkpoint (and validation render) every this many iterations; 0
    /// saves only at the end.
    pub checkpoint_every: u64,
    pub depth_pairs: usize,
    pub weights: LossWeights,
    pub depth_mode: DepthMode,
    pub adam: AdamConfig,
    pub schedule: LrSchedule,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200_000,
            rays: 1024,
            samples: 64,
            seed: 0,
            checkpoint_every: 1000,
            depth_pairs: 512,
            weights: LossWeights::default(),
            depth_mode: DepthMode::Order,
            adam: AdamConfig::default(),
            schedule: LrSchedule::Constant,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rays == 0 || self.samples < 2 {
            return Err(Error::Config(format!(
                "need at least 1 ray and 2 samples per batch, got {} and {}",
                self.rays, self.samples
            )));
        }
        self.weights.validate()?;
        self.adam.validate()?;
        self.arch.validate()
    }

    fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig { weights: self.weights, depth_mode: self.depth_mode }
    }
}

/// The random stream of one iteration; depends only on the seed and the
/// iteration number.
pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

/// One batch, forward, backward and Adam update.
pub fn train_iteration(
    dataset: &SceneDataset,
    params: &mut FieldParams<f32>,
    adam: &mut AdamState<f32>,
    cfg: &TrainConfig,
    iteration: u64,
) -> Result<LossReport> {
    let mut rng = iteration_rng(cfg.seed, iteration);
    let batch = sample_batch(dataset, cfg.rays, cfg.samples, cfg.depth_pairs, &mut rng)?;
    let tape = Tape::<f32>::new();
    let fields = params.bind(&tape, true)?;
    let (total, mut report) = objective(&tape, &fields, &cfg.arch, dataset, &batch, &cfg.objective())?;
    report.iteration = iteration;
    if !report.total.is_finite() {
        return Err(Error::NonFiniteLoss(iteration));
    }
    tape.backward(total)?;
    let grads: Vec<Tensor<f32>> = fields
        .named()
        .into_iter()
        .map(|(_, v)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let mut blocks: Vec<(String, &mut Tensor<f32>)> = names.into_iter().zip(params.blocks_mut()).collect();
    adam.update_with_lr(&mut blocks, &grads, cfg.schedule.lr(cfg.adam.lr, iteration))?;
    Ok(report)
}

/// Training state over one dataset.
pub struct Trainer<'d> {
    pub dataset: &'d SceneDataset,
    pub config: TrainConfig,
    pub params: FieldParams<f32>,
    pub adam: AdamState<f32>,
    /// Iterations completed.
    pub iteration: u64,
}

impl<'d> Trainer<'d> {
    pub fn new(dataset: &'d SceneDataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params::<f32>(config.seed, &config.arch)?;
        let shapes: Vec<Vec<usize>> = params.shapes().into_iter().map(|s| s.1).collect();
        let adam = AdamState::new(config.adam, &shapes);
        Ok(Self { dataset, config, params, adam, iteration: 0 })
    }

    /// Continues from a checkpoint. Its architecture, seed and Adam
    /// settings replace those in `config`.
    pub fn resume(dataset: &'d SceneDataset, mut config: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        config.arch = ckpt.arch;
        config.seed = ckpt.seed;
        config.adam = ckpt.adam.config;
        config.validate()?;
        Ok(Self { dataset, config, params: ckpt.params, adam: ckpt.adam, iteration: ckpt.iteration })
    }

    pub fn step(&mut self) -> Result<LossReport> {
        let report = train_iteration(self.dataset, &mut self.params, &mut self.adam, &self.config, self.iteration)?;
        self.iteration += 1;
        Ok(report)
    }

    pub fn scene_info(&self) -> SceneInfo {
        let n = self.dataset.normalization;
        let (near, far) = self.dataset.bounds();
        SceneInfo {
            normalization: n,
            near: near / n.scale,
            far: far / n.scale,
            width: self.dataset.width,
            height: self.dataset.height,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            arch: self.config.arch,
            iteration: self.iteration,
            seed: self.config.seed,
            params: self.params.clone(),
            adam: self.adam.clone(),
            scene: self.scene_info(),
        }
    }
}

/// File name of the latest checkpoint in an output directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.dnrf";

/// Runs `trainer` up to its configured iteration count, passing every
/// report to `on_report`. With `out_dir`, checkpoints go to
/// [`CHECKPOINT_FILE`] there at the configured cadence and at the end,
/// each with a render of frame 0 as `val_<iteration>.png`.
pub fn train(
    trainer: &mut Trainer<'_>,
    out_dir: Option<&Path>,
    mut on_report: impl FnMut(&LossReport) -> Result<()>,
) -> Result<Checkpoint> {
    let every = trainer.config.checkpoint_every;
    while trainer.iteration < trainer.config.iterations {
        let report = trainer.step()?;
        on_report(&report)?;
        if let Some(dir) = out_dir {
            if every > 0 && trainer.iteration % every == 0 && trainer.iteration < trainer.config.iterations {
                save_with_validation(trainer, dir)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_with_validation(trainer, dir)?;
    }
    Ok(trainer.checkpoint())
}

fn save_with_validation(trainer: &Trainer<'_>, dir: &Path) -> Result<()> {
    let ckpt = trainer.checkpoint();
    ckpt.save(&dir.join(CHECKPOINT_FILE))?;
    let frame = &trainer.dataset.frames[0];
    let renderer = FieldRenderer::new(ckpt.arch, ckpt.params, trainer.config.samples);
    let img = render_image(&renderer, &frame.camera, 0.0, RenderMode::Full, crate::view::worker_count())?;
    img.save_png(&dir.join(format!("val_{:06}.png", trainer.iteration)))?;
    log::info!("iteration {}: frame 0 PSNR {:.2} dB", trainer.iteration, psnr(&img, &frame.image)?);
    Ok(())
}
