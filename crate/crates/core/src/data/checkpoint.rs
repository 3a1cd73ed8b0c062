//! Binary checkpoints.
//!
//! Little-endian throughout:
//!
//! ```text
//! "DNRF" u32 version
//! architecture: u32 depth, u32 width, i32 skip (-1 = none),
//!               u32 l_pos, u32 l_dir, u32 l_time, u8 include_input, f64 flow_scale
//! u64 iteration, u64 seed
//! Adam: u64 step, f64 lr, f64 beta1, f64 beta2, f64 eps
//! scene: f64 center[3], f64 scale, f64 near, f64 far, u32 width, u32 height
//! u32 block count, then per block:
//!     u32 name length, name (UTF-8), u32 rank, u32 dims[rank], f32 values
//! ```
//!
//! Blocks are the field parameters in [`crate::fields::Fields::named`]
//! order, then `adam.m.<name>` and `adam.v.<name>` for each.

use std::fs;
use std::path::Path;

use dnerf_autodiff::Tensor;

use super::Normalization;
use crate::encoding::EncodingConfig;
use crate::error::{io_err, Error, Result};
use crate::fields::{expected_shapes, init_params, ArchConfig, FieldParams};
use crate::optimize::{AdamConfig, AdamState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DNRF";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where the parameters live: the normalization of the training scene and
/// its bounds and image size in world units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneInfo {
    pub normalization: Normalization,
    pub near: f64,
    pub far: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub iteration: u64,
    /// Training seed; with `iteration` it fixes every later batch.
    pub seed: u64,
    pub params: FieldParams<f32>,
    pub adam: AdamState<f32>,
    pub scene: SceneInfo,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn block(&mut self, name: &str, t: &Tensor<f32>) {
        self.u32(name.len() as u32);
        self.0.extend_from_slice(name.as_bytes());
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::TruncatedCheckpoint)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.arr()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    fn block(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::ArchitectureMismatch("block name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = self.take(count.checked_mul(4).ok_or(Error::TruncatedCheckpoint)?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let a = &self.arch;
        w.u32(a.depth as u32);
        w.u32(a.width as u32);
        w.i32(a.skip.map_or(-1, |s| s as i32));
        w.u32(a.encoding.l_pos as u32);
        w.u32(a.encoding.l_dir as u32);
        w.u32(a.encoding.l_time as u32);
        w.u8(a.encoding.include_input as u8);
        w.f64(a.flow_scale);
        w.u64(self.iteration);
        w.u64(self.seed);
        let c = &self.adam.config;
        w.u64(self.adam.step);
        for v in [c.lr, c.beta1, c.beta2, c.eps] {
            w.f64(v);
        }
        let s = &self.scene;
        for v in s.normalization.center.iter().chain(&[s.normalization.scale, s.near, s.far]) {
            w.f64(*v);
        }
        w.u32(s.width as u32);
        w.u32(s.height as u32);
        let named = self.params.named();
        w.u32((named.len() * 3) as u32);
        for (name, t) in &named {
            w.block(name, t);
        }
        for (prefix, moments) in [("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            for ((name, _), t) in named.iter().zip(moments.iter()) {
                w.block(&format!("{prefix}{name}"), t);
            }
        }
        w.0
    }

    /// Parses a checkpoint. With `expect`, the stored architecture must
    /// produce the same parameter shapes.
    pub fn from_bytes(bytes: &[u8], expect: Option<&ArchConfig>) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
        }
        let depth = r.u32()? as usize;
        let width = r.u32()? as usize;
        let skip = r.i32()?;
        let encoding = EncodingConfig {
            l_pos: r.u32()? as usize,
            l_dir: r.u32()? as usize,
            l_time: r.u32()? as usize,
            include_input: r.u8()? != 0,
        };
        let arch = ArchConfig {
            depth,
            width,
            skip: (skip >= 0).then_some(skip as usize),
            encoding,
            flow_scale: r.f64()?,
        };
        arch.validate().map_err(|e| Error::ArchitectureMismatch(format!("stored architecture is invalid: {e}")))?;
        let iteration = r.u64()?;
        let seed = r.u64()?;
        let step = r.u64()?;
        let config = AdamConfig { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
        let center = [r.f64()?, r.f64()?, r.f64()?];
        let scale = r.f64()?;
        let (near, far) = (r.f64()?, r.f64()?);
        let (img_w, img_h) = (r.u32()? as usize, r.u32()? as usize);
        let scene = SceneInfo { normalization: Normalization { center, scale }, near, far, width: img_w, height: img_h };

        let stored = expected_shapes(&arch);
        if let Some(want) = expect {
            let wanted = expected_shapes(want);
            check_shapes(&stored, &wanted)?;
        }
        let count = r.u32()? as usize;
        if count != stored.len() * 3 {
            return Err(Error::ArchitectureMismatch(format!(
                "checkpoint has {count} blocks, architecture needs {}",
                stored.len() * 3
            )));
        }
        let mut blocks = Vec::with_capacity(count);
        for _ in 0..count {
            blocks.push(r.block()?);
        }
        if r.pos != bytes.len() {
            return Err(Error::ArchitectureMismatch(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let expected_names: Vec<(String, Vec<usize>)> = ["", "adam.m.", "adam.v."]
            .iter()
            .flat_map(|p| stored.iter().map(move |(n, s)| (format!("{p}{n}"), s.clone())))
            .collect();
        let found: Vec<(String, Vec<usize>)> = blocks.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        check_shapes(&found, &expected_names)?;

        let mut tensors = blocks.into_iter().map(|(_, t)| t);
        let mut params = init_params::<f32>(0, &arch)?;
        for slot in params.blocks_mut() {
            *slot = tensors.next().expect("count checked");
        }
        let m: Vec<Tensor<f32>> = tensors.by_ref().take(stored.len()).collect();
        let v: Vec<Tensor<f32>> = tensors.collect();
        Ok(Self { arch, iteration, seed, params, adam: AdamState { config, step, m, v }, scene })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path, expect: Option<&ArchConfig>) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes, expect)
    }
}

fn check_shapes(found: &[(String, Vec<usize>)], wanted: &[(String, Vec<usize>)]) -> Result<()> {
    for (f, w) in found.iter().zip(wanted) {
        if f != w {
            return Err(Error::ArchitectureMismatch(format!(
                "block {} has shape {:?}, expected {} with shape {:?}",
                f.0, f.1, w.0, w.1
            )));
        }
    }
    if found.len() != wanted.len() {
        return Err(Error::ArchitectureMismatch(format!("{} blocks, expected {}", found.len(), wanted.len())));
    }
    Ok(())
}
