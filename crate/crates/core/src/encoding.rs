//! Sinusoidal positional encoding.
//!
//! Layout per row is `[x, sin(2^0 π x), cos(2^0 π x), …, sin(2^{L-1} π x), cos(2^{L-1} π x)]`,
//! each block spanning all input components.

use std::f64::consts::PI;

use dnerf_autodiff::{Real, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub l_pos: usize,
    pub l_dir: usize,
    pub l_time: usize,
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self { l_pos: 10, l_dir: 4, l_time: 4, include_input: true }
    }
}

/// Width of the encoding of a `dim`-vector with `levels` frequencies.
pub fn encoded_width(dim: usize, levels: usize, include_input: bool) -> usize {
    dim * (include_input as usize + 2 * levels)
}

/// Encodes one vector.
pub fn encode(x: &[f64], levels: usize, include_input: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_width(x.len(), levels, include_input));
    if include_input {
        out.extend_from_slice(x);
    }
    for j in 0..levels {
        let f = (1u64 << j) as f64 * PI;
        out.extend(x.iter().map(|v| (f * v).sin()));
        out.extend(x.iter().map(|v| (f * v).cos()));
    }
    out
}

/// Encodes every row of an `[n, dim]` var.
pub fn encode_var<'t, T: Real>(x: Var<'t, T>, levels: usize, include_input: bool) -> Result<Var<'t, T>> {
    let mut parts = Vec::with_capacity(include_input as usize + 2 * levels);
    if include_input {
        parts.push(x);
    }
    for j in 0..levels {
        let scaled = x.scale((1u64 << j) as f64 * PI)?;
        parts.push(scaled.sin()?);
        parts.push(scaled.cos()?);
    }
    Ok(Var::concat(&parts, 1)?)
}
