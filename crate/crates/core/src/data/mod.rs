//! Scene datasets on disk and in memory.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! poses.txt           index fx fy cx cy <12 row-major camera-to-world values> near far
//! images/%04d.png     RGB frames
//! masks/%04d.png      0 = static, 255 = dynamic
//! flow/fw_%04d.flo2   flow to the next frame (all but the last)
//! flow/bw_%04d.flo2   flow to the previous frame (all but the first)
//! depth/%04d.dpt1     monocular depth
//! ```
//!
//! Loading rescales the scene so camera centers land in `[-0.5, 0.5]³`
//! and every view frustum inside `[-1, 1]³`.

pub mod checkpoint;
pub mod formats;
pub mod synth;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{io_err, Error, Result};
use crate::raster::{load_gray_png, save_gray_png, Image};
pub use formats::{DepthMap, FlowMap};

/// One video frame with its camera and optional precomputed inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Image,
    /// Per pixel, 1 = dynamic.
    pub mask: Vec<f64>,
    pub camera: Camera,
    pub flow_fw: Option<FlowMap>,
    pub flow_bw: Option<FlowMap>,
    pub depth: Option<DepthMap>,
}

/// Frames in the units they are stored in.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub frames: Vec<Frame>,
}

/// Similarity transform `x ↦ (x − center) · scale` into the normalized
/// scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: [f64; 3],
    pub scale: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Self { center: [0.0; 3], scale: 1.0 }
    }

    /// Centers on the mean camera position, then scales so the frusta fit
    /// in `[-1, 1]³` and the camera centers in `[-0.5, 0.5]³`.
    pub fn from_cameras(cams: &[Camera]) -> Self {
        let n = cams.len().max(1) as f64;
        let center = cams.iter().fold(Vector3::zeros(), |a, c| a + c.center) / n;
        let mut extent = 0.0f64;
        let mut spread = 0.0f64;
        for c in cams {
            let (w, h) = (c.width as f64, c.height as f64);
            for (u, v) in [(-0.5, -0.5), (w - 0.5, -0.5), (-0.5, h - 0.5), (w - 0.5, h - 0.5)] {
                let d = c.direction_through(u, v);
                for s in [c.near, c.far] {
                    extent = extent.max((c.center + d * s - center).amax());
                }
            }
            spread = spread.max((c.center - center).amax());
        }
        let mut scale = if extent > 0.0 { 1.0 / extent } else { 1.0 };
        if spread * scale > 0.5 {
            scale = 0.5 / spread;
        }
        Self { center: center.into(), scale }
    }

    pub fn point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        (x - Vector3::from(self.center)) * self.scale
    }

    pub fn to_world(&self, x: &Vector3<f64>) -> Vector3<f64> {
        x / self.scale + Vector3::from(self.center)
    }

    pub fn camera(&self, cam: &Camera) -> Result<Camera> {
        Camera::new(
            cam.intrinsics(),
            cam.rotation,
            self.point(&cam.center),
            cam.width,
            cam.height,
            cam.near * self.scale,
            cam.far * self.scale,
        )
    }
}

/// A validated, normalized dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub frames: Vec<Frame>,
    pub width: usize,
    pub height: usize,
    pub normalization: Normalization,
    /// Every needed flow map is present.
    pub has_flow: bool,
    /// Every depth map is present.
    pub has_depth: bool,
}

impl SceneDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Normalized time of frame `i`.
    pub fn time(&self, i: usize) -> f64 {
        i as f64 / (self.frames.len() - 1) as f64
    }

    /// Smallest near and largest far bound over all frames.
    pub fn bounds(&self) -> (f64, f64) {
        let near = self.frames.iter().map(|f| f.camera.near).fold(f64::INFINITY, f64::min);
        let far = self.frames.iter().map(|f| f.camera.far).fold(0.0, f64::max);
        (near, far)
    }

    /// Validates and normalizes.
    pub fn from_raw(raw: RawDataset) -> Result<Self> {
        let n = raw.frames.len();
        let here = PathBuf::from("<dataset>");
        if n < 2 {
            return Err(Error::Dataset { path: here, msg: format!("need at least 2 frames, got {n}") });
        }
        let (width, height) = (raw.frames[0].image.width, raw.frames[0].image.height);
        for (i, f) in raw.frames.iter().enumerate() {
            let bad = |msg: String| Error::Dataset { path: format!("frame {i}").into(), msg };
            if (f.image.width, f.image.height) != (width, height) {
                return Err(bad(format!("image is {}x{}, expected {width}x{height}", f.image.width, f.image.height)));
            }
            if (f.camera.width, f.camera.height) != (width, height) {
                return Err(bad(format!("camera is {}x{}, expected {width}x{height}", f.camera.width, f.camera.height)));
            }
            if f.mask.len() != width * height {
                return Err(bad(format!("mask has {} pixels, expected {}", f.mask.len(), width * height)));
            }
            if f.mask.iter().any(|&m| m != 0.0 && m != 1.0) {
                return Err(bad("non-binary mask".into()));
            }
            for map in f.flow_fw.iter().chain(&f.flow_bw) {
                if (map.width, map.height) != (width, height) {
                    return Err(bad(format!("flow is {}x{}, expected {width}x{height}", map.width, map.height)));
                }
            }
            if let Some(d) = &f.depth {
                if (d.width, d.height) != (width, height) {
                    return Err(bad(format!("depth is {}x{}, expected {width}x{height}", d.width, d.height)));
                }
            }
        }
        let has_flow = raw
            .frames
            .iter()
            .enumerate()
            .all(|(i, f)| (i + 1 == n || f.flow_fw.is_some()) && (i == 0 || f.flow_bw.is_some()));
        let has_depth = raw.frames.iter().all(|f| f.depth.is_some());
        if !has_flow {
            log::warn!("optical flow incomplete; motion matching disabled");
        }
        if !has_depth {
            log::warn!("monocular depth incomplete; depth loss disabled");
        }

        let cams: Vec<Camera> = raw.frames.iter().map(|f| f.camera.clone()).collect();
        let norm = Normalization::from_cameras(&cams);
        let frames = raw
            .frames
            .into_iter()
            .map(|mut f| {
                f.camera = norm.camera(&f.camera)?;
                if let Some(d) = &mut f.depth {
                    d.data.iter_mut().for_each(|v| *v = (*v as f64 * norm.scale) as f32);
                }
                Ok(f)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { frames, width, height, normalization: norm, has_flow, has_depth })
    }
}

fn frame_path(dir: &Path, sub: &str, prefix: &str, index: usize, ext: &str) -> PathBuf {
    dir.join(sub).join(format!("{prefix}{index:04}.{ext}"))
}

/// One parsed line of `poses.txt`.
fn parse_pose_line(path: &Path, lineno: usize, line: &str) -> Result<(usize, [f64; 4], [f64; 12], f64, f64)> {
    let bad = |msg: String| Error::Dataset { path: path.into(), msg: format!("line {lineno}: {msg}") };
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() != 19 {
        return Err(bad(format!("expected 19 values, found {}", tokens.len())));
    }
    let index: usize = tokens[0].parse().map_err(|_| bad(format!("bad frame index {:?}", tokens[0])))?;
    let vals = tokens[1..]
        .iter()
        .map(|t| t.parse::<f64>().map_err(|_| bad(format!("bad number {t:?}"))))
        .collect::<Result<Vec<f64>>>()?;
    let intr = [vals[0], vals[1], vals[2], vals[3]];
    let pose: [f64; 12] = vals[4..16].try_into().unwrap();
    Ok((index, intr, pose, vals[16], vals[17]))
}

impl RawDataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let poses_path = dir.join("poses.txt");
        let text = fs::read_to_string(&poses_path).map_err(io_err(&poses_path))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            entries.push(parse_pose_line(&poses_path, i + 1, line)?);
        }
        entries.sort_by_key(|e| e.0);
        let n = entries.len();
        let mut frames = Vec::with_capacity(n);
        for (pos, (index, intr, pose, near, far)) in entries.into_iter().enumerate() {
            let img_path = frame_path(dir, "images", "", index, "png");
            let image = Image::load_png(&img_path)?;
            let size = (image.width, image.height);
            let camera = Camera::from_pose(intr, &pose, image.width, image.height, near, far)
                .map_err(|e| Error::Dataset { path: poses_path.clone(), msg: format!("frame {index}: {e}") })?;

            let mask_path = frame_path(dir, "masks", "", index, "png");
            let (mw, mh, raw_mask) = load_gray_png(&mask_path)?;
            if (mw, mh) != size {
                return Err(Error::Dataset {
                    path: mask_path,
                    msg: format!("mask is {mw}x{mh}, expected {}x{}", size.0, size.1),
                });
            }
            let mut mask = Vec::with_capacity(raw_mask.len());
            for v in raw_mask {
                match v {
                    0 => mask.push(0.0),
                    255 => mask.push(1.0),
                    value => return Err(Error::NonBinaryMask { path: mask_path, value }),
                }
            }

            let optional_flow = |prefix: &str, needed: bool| -> Result<Option<FlowMap>> {
                let p = frame_path(dir, "flow", prefix, index, "flo2");
                if !needed || !p.exists() {
                    return Ok(None);
                }
                FlowMap::load(&p, Some(size)).map(Some)
            };
            let flow_fw = optional_flow("fw_", pos + 1 < n)?;
            let flow_bw = optional_flow("bw_", pos > 0)?;
            let depth_path = frame_path(dir, "depth", "", index, "dpt1");
            let depth = if depth_path.exists() { Some(DepthMap::load(&depth_path, Some(size))?) } else { None };
            frames.push(Frame { image, mask, camera, flow_fw, flow_bw, depth });
        }
        Ok(Self { frames })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "masks", "flow", "depth"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        let mut poses = String::new();
        for (i, f) in self.frames.iter().enumerate() {
            let c = &f.camera;
            write!(poses, "{i} {} {} {} {}", c.fx, c.fy, c.cx, c.cy).unwrap();
            for v in c.pose() {
                write!(poses, " {v}").unwrap();
            }
            writeln!(poses, " {} {}", c.near, c.far).unwrap();
            f.image.save_png(&frame_path(dir, "images", "", i, "png"))?;
            let mask = f.mask.iter().map(|&m| if m != 0.0 { 255 } else { 0 }).collect();
            save_gray_png(&frame_path(dir, "masks", "", i, "png"), f.image.width, f.image.height, mask)?;
            if let Some(fl) = &f.flow_fw {
                fl.save(&frame_path(dir, "flow", "fw_", i, "flo2"))?;
            }
            if let Some(fl) = &f.flow_bw {
                fl.save(&frame_path(dir, "flow", "bw_", i, "flo2"))?;
            }
            if let Some(d) = &f.depth {
                d.save(&frame_path(dir, "depth", "", i, "dpt1"))?;
            }
        }
        let p = dir.join("poses.txt");
        fs::write(&p, poses).map_err(io_err(&p))
    }
}

/// Reads, validates and normalizes a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<SceneDataset> {
    SceneDataset::from_raw(RawDataset::load(dir)?)
}
