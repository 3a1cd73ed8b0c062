//! Whole-image rendering through anything that can shade rays.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use dnerf_autodiff::{Real, Tape};

use crate::camera::{generate_rays, Camera, Ray};
use crate::error::{Error, Result};
use crate::fields::{ArchConfig, FieldParams};
use crate::raster::Image;
use crate::render::{render_full, SampleSet};

/// Environment variable holding the worker count for image rendering.
pub const WORKERS_ENV: &str = "DNERF_WORKERS";

const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    /// Blended static and dynamic fields.
    #[default]
    Full,
    Static,
    /// Dynamic content only, static region transparent.
    Dynamic,
}

impl FromStr for RenderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "static" => Ok(Self::Static),
            "dynamic" => Ok(Self::Dynamic),
            other => Err(Error::Config(format!("unknown render mode {other:?} (expected full, static or dynamic)"))),
        }
    }
}

pub trait ViewRenderer: Sync {
    /// Colors of rays of `cam` at normalized time `time`.
    fn render_rays(&self, cam: &Camera, rays: &[Ray], time: f64, mode: RenderMode) -> Result<Vec<[f64; 3]>>;
}

/// Trained fields, rendered with midpoint samples between each camera's
/// bounds.
#[derive(Clone, Debug)]
pub struct FieldRenderer {
    pub arch: ArchConfig,
    pub params: FieldParams<f32>,
    pub samples: usize,
}

impl FieldRenderer {
    pub fn new(arch: ArchConfig, params: FieldParams<f32>, samples: usize) -> Self {
        Self { arch, params, samples }
    }
}

impl ViewRenderer for FieldRenderer {
    fn render_rays(&self, cam: &Camera, rays: &[Ray], time: f64, mode: RenderMode) -> Result<Vec<[f64; 3]>> {
        let samples = SampleSet::stratified::<rand_chacha::ChaCha8Rng>(&vec![(cam.near, cam.far); rays.len()], self.samples, None)?;
        let tape = Tape::<f32>::new();
        let fields = self.params.bind(&tape, false)?;
        let out = render_full(&tape, &fields, &self.arch, rays, &samples, &vec![time; rays.len()])?;
        let color = match mode {
            RenderMode::Full => out.full.color,
            RenderMode::Static => out.static_pass.color,
            RenderMode::Dynamic => out.dynamic_only.color,
        };
        Ok(color.value().data().chunks_exact(3).map(|c| [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()]).collect())
    }
}

/// Worker count from [`WORKERS_ENV`], else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Renders every pixel of `cam`. Chunks are handed out round-robin and
/// reassembled in order, so the result does not depend on `workers`.
pub fn render_image<R: ViewRenderer + ?Sized>(
    renderer: &R,
    cam: &Camera,
    time: f64,
    mode: RenderMode,
    workers: usize,
) -> Result<Image> {
    if !(0.0..=1.0).contains(&time) {
        return Err(Error::TimeOutOfRange(time));
    }
    let pixels: Vec<usize> = (0..cam.num_pixels()).collect();
    let chunks: Vec<&[usize]> = pixels.chunks(CHUNK).collect();
    let workers = workers.clamp(1, chunks.len().max(1));
    let shade = |chunk: &[usize]| -> Result<Vec<[f64; 3]>> {
        let rays = generate_rays(cam, 0, chunk)?;
        renderer.render_rays(cam, &rays, time, mode)
    };
    let mut results: Vec<Option<Result<Vec<[f64; 3]>>>> = (0..chunks.len()).map(|_| None).collect();
    if workers == 1 {
        for (slot, chunk) in results.iter_mut().zip(&chunks) {
            *slot = Some(shade(chunk));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let chunks = &chunks;
                    let shade = &shade;
                    scope.spawn(move || {
                        (w..chunks.len()).step_by(workers).map(|i| (i, shade(chunks[i]))).collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("render worker panicked") {
                    results[i] = Some(r);
                }
            }
        });
    }
    let mut colors = Vec::with_capacity(pixels.len());
    for r in results {
        colors.extend(r.expect("every chunk rendered")?);
    }
    Image::from_pixels(cam.width, cam.height, &colors)
}
