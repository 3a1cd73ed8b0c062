//! Binary flow (`FLO2`) and depth (`DPT1`) rasters.
//!
//! Both start with a 4-byte magic, then width and height as little-endian
//! `u32`, then row-major little-endian `f32` values: `(u, v)` pairs for flow,
//! one value per pixel for depth.

use std::fs;
use std::path::Path;

use crate::error::{io_err, Error, Result};

pub const FLOW_MAGIC: &[u8; 4] = b"FLO2";
pub const DEPTH_MAGIC: &[u8; 4] = b"DPT1";

/// Per-pixel displacement in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

fn encode(magic: &[u8; 4], width: usize, height: usize, values: impl Iterator<Item = f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode(path: &Path, magic: &[u8; 4], channels: usize, expect: Option<(usize, usize)>) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |msg: String| Error::Dataset { path: path.into(), msg };
    if bytes.len() < 12 || &bytes[..4] != magic {
        return Err(bad(format!("missing {} header", String::from_utf8_lossy(magic))));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if let Some((w, h)) = expect {
        if (width, height) != (w, h) {
            return Err(bad(format!("header size {width}x{height}, expected {w}x{h}")));
        }
    }
    let count = width * height * channels;
    if bytes.len() != 12 + count * 4 {
        return Err(bad(format!("expected {} payload bytes, found {}", count * 4, bytes.len() - 12)));
    }
    let values = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((width, height, values))
}

impl FlowMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![[0.0; 2]; width * height] }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(FLOW_MAGIC, self.width, self.height, self.data.iter().flatten().copied())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    /// Reads a flow file, optionally requiring the given size.
    pub fn load(path: &Path, expect: Option<(usize, usize)>) -> Result<Self> {
        let (width, height, v) = decode(path, FLOW_MAGIC, 2, expect)?;
        Ok(Self { width, height, data: v.chunks_exact(2).map(|c| [c[0], c[1]]).collect() })
    }
}

impl DepthMap {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(DEPTH_MAGIC, self.width, self.height, self.data.iter().copied())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path, expect: Option<(usize, usize)>) -> Result<Self> {
        let (width, height, data) = decode(path, DEPTH_MAGIC, 1, expect)?;
        Ok(Self { width, height, data })
    }
}
