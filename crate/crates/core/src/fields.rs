//! Static and dynamic radiance fields.
//!
//! Parameters are stored in [`Fields`], which is generic over the slot type:
//! `Fields<Tensor<T>>` holds values, `Fields<Var<'t, T>>` the same layout
//! bound to a tape.

use dnerf_autodiff::{Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{encode_var, encoded_width, EncodingConfig};
use crate::error::{Error, Result};

/// Tolerance on `|d| = 1` for viewing directions.
pub const UNIT_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub depth: usize,
    pub width: usize,
    /// Trunk layer (0-based) whose input is the hidden state concatenated
    /// with the encoded input again.
    pub skip: Option<usize>,
    pub encoding: EncodingConfig,
    /// Bound on each scene-flow component, in normalized scene units.
    pub flow_scale: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { depth: 8, width: 256, skip: Some(5), encoding: EncodingConfig::default(), flow_scale: 0.25 }
    }
}

impl ArchConfig {
    /// Small networks for CPU training runs.
    pub fn desk() -> Self {
        Self { depth: 4, width: 64, skip: None, ..Self::default() }
    }

    /// Tiny networks for gradient checks.
    pub fn tiny() -> Self {
        Self { depth: 2, width: 16, skip: Some(1), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width < 2 {
            return Err(Error::Config(format!("depth {} / width {} too small", self.depth, self.width)));
        }
        if let Some(s) = self.skip {
            if s == 0 || s >= self.depth {
                return Err(Error::Config(format!("skip layer {s} must lie in 1..{}", self.depth)));
            }
        }
        if !(self.flow_scale > 0.0 && self.flow_scale.is_finite()) {
            return Err(Error::Config(format!("flow_scale must be positive, got {}", self.flow_scale)));
        }
        Ok(())
    }

    pub fn pos_width(&self) -> usize {
        encoded_width(3, self.encoding.l_pos, self.encoding.include_input)
    }

    pub fn dir_width(&self) -> usize {
        encoded_width(3, self.encoding.l_dir, self.encoding.include_input)
    }

    pub fn time_width(&self) -> usize {
        encoded_width(1, self.encoding.l_time, self.encoding.include_input)
    }

    fn trunk_shapes(&self, input: usize) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|i| {
                let fan_in = match i {
                    0 => input,
                    i if Some(i) == self.skip => self.width + input,
                    _ => self.width,
                };
                (fan_in, self.width)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<P> {
    /// `[fan_in, fan_out]`
    pub w: P,
    /// `[fan_out]`
    pub b: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StaticField<P> {
    pub trunk: Vec<Dense<P>>,
    pub sigma: Dense<P>,
    pub feature: Dense<P>,
    pub color_hidden: Dense<P>,
    pub color: Dense<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicField<P> {
    pub trunk: Vec<Dense<P>>,
    pub sigma: Dense<P>,
    pub color: Dense<P>,
    /// Six outputs: forward flow then backward flow.
    pub flow: Dense<P>,
    pub blend: Dense<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fields<P> {
    pub static_field: StaticField<P>,
    pub dynamic_field: DynamicField<P>,
}

pub type FieldParams<T> = Fields<Tensor<T>>;
pub type BoundFields<'t, T> = Fields<Var<'t, T>>;

impl<P> Fields<P> {
    fn denses(&self) -> Vec<(String, &Dense<P>)> {
        let s = &self.static_field;
        let d = &self.dynamic_field;
        let mut out: Vec<(String, &Dense<P>)> = Vec::new();
        out.extend(s.trunk.iter().enumerate().map(|(i, l)| (format!("static.trunk.{i}"), l)));
        out.push(("static.sigma".into(), &s.sigma));
        out.push(("static.feature".into(), &s.feature));
        out.push(("static.color_hidden".into(), &s.color_hidden));
        out.push(("static.color".into(), &s.color));
        out.extend(d.trunk.iter().enumerate().map(|(i, l)| (format!("dynamic.trunk.{i}"), l)));
        out.push(("dynamic.sigma".into(), &d.sigma));
        out.push(("dynamic.color".into(), &d.color));
        out.push(("dynamic.flow".into(), &d.flow));
        out.push(("dynamic.blend".into(), &d.blend));
        out
    }

    fn denses_mut(&mut self) -> Vec<&mut Dense<P>> {
        let s = &mut self.static_field;
        let d = &mut self.dynamic_field;
        let mut out: Vec<&mut Dense<P>> = s.trunk.iter_mut().collect();
        out.extend([&mut s.sigma, &mut s.feature, &mut s.color_hidden, &mut s.color]);
        out.extend(d.trunk.iter_mut());
        out.extend([&mut d.sigma, &mut d.color, &mut d.flow, &mut d.blend]);
        out
    }

    /// Every parameter block with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &P)> {
        self.denses()
            .into_iter()
            .flat_map(|(name, l)| [(format!("{name}.w"), &l.w), (format!("{name}.b"), &l.b)])
            .collect()
    }

    /// Same order as [`Fields::named`].
    pub fn blocks_mut(&mut self) -> Vec<&mut P> {
        self.denses_mut().into_iter().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }

    pub fn try_map<Q, E>(&self, mut f: impl FnMut(&P) -> std::result::Result<Q, E>) -> std::result::Result<Fields<Q>, E> {
        let mut dense = |l: &Dense<P>| -> std::result::Result<Dense<Q>, E> { Ok(Dense { w: f(&l.w)?, b: f(&l.b)? }) };
        let s = &self.static_field;
        let d = &self.dynamic_field;
        let static_field = StaticField {
            trunk: s.trunk.iter().map(&mut dense).collect::<std::result::Result<_, _>>()?,
            sigma: dense(&s.sigma)?,
            feature: dense(&s.feature)?,
            color_hidden: dense(&s.color_hidden)?,
            color: dense(&s.color)?,
        };
        let dynamic_field = DynamicField {
            trunk: d.trunk.iter().map(&mut dense).collect::<std::result::Result<_, _>>()?,
            sigma: dense(&d.sigma)?,
            color: dense(&d.color)?,
            flow: dense(&d.flow)?,
            blend: dense(&d.blend)?,
        };
        Ok(Fields { static_field, dynamic_field })
    }
}

impl<T: Real> FieldParams<T> {
    /// Puts every block on the tape, as a leaf when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Result<BoundFields<'t, T>> {
        self.try_map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
            .map_err(Error::from)
    }

    pub fn cast<U: Real>(&self) -> FieldParams<U> {
        self.try_map(|p| Ok::<_, std::convert::Infallible>(p.cast())).unwrap_or_else(|e| match e {})
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, p)| p.numel()).sum()
    }

    /// Block shapes, in [`Fields::named`] order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.named().into_iter().map(|(n, p)| (n, p.shape().to_vec())).collect()
    }
}

/// Block shapes an architecture implies, in [`Fields::named`] order.
pub fn expected_shapes(arch: &ArchConfig) -> Vec<(String, Vec<usize>)> {
    init_params::<f64>(0, arch).map(|p| p.shapes()).unwrap_or_default()
}

/// Deterministic initialization. Weights are uniform in `±sqrt(6 / fan_in)`,
/// biases zero; the flow and blending heads start at zero.
pub fn init_params<T: Real>(seed: u64, arch: &ArchConfig) -> Result<FieldParams<T>> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dense = |fan_in: usize, fan_out: usize, zero: bool| -> Dense<Tensor<T>> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Tensor::from_fn([fan_in, fan_out], |_| {
            if zero {
                T::zero()
            } else {
                T::of(rng.gen_range(-bound..bound))
            }
        });
        Dense { w, b: Tensor::zeros([fan_out]) }
    };
    let w = arch.width;
    let static_field = StaticField {
        trunk: arch.trunk_shapes(arch.pos_width()).into_iter().map(|(i, o)| dense(i, o, false)).collect(),
        sigma: dense(w, 1, false),
        feature: dense(w, w, false),
        color_hidden: dense(w + arch.dir_width(), w / 2, false),
        color: dense(w / 2, 3, false),
    };
    let dynamic_field = DynamicField {
        trunk: arch
            .trunk_shapes(arch.pos_width() + arch.time_width())
            .into_iter()
            .map(|(i, o)| dense(i, o, false))
            .collect(),
        sigma: dense(w, 1, false),
        color: dense(w, 3, false),
        flow: dense(w, 6, true),
        blend: dense(w, 1, true),
    };
    Ok(Fields { static_field, dynamic_field })
}

fn trunk<'t, T: Real>(layers: &[Dense<Var<'t, T>>], input: Var<'t, T>, skip: Option<usize>) -> Result<Var<'t, T>> {
    let mut h = input;
    for (i, l) in layers.iter().enumerate() {
        if i > 0 && Some(i) == skip {
            h = Var::concat(&[input, h], 1)?;
        }
        h = h.linear(l.w, l.b)?.relu()?;
    }
    Ok(h)
}

fn check_rows<T: Real>(x: &Var<'_, T>, cols: usize, what: &'static str) -> Result<usize> {
    let s = x.shape();
    if s.len() != 2 || s[1] != cols {
        return Err(Error::LengthMismatch { what, expected: cols, actual: s.last().copied().unwrap_or(0) });
    }
    Ok(s[0])
}

/// Static field at positions `x: [n, 3]` seen along unit directions
/// `d: [n, 3]`. Returns `(σ [n, 1], c [n, 3])`.
pub fn eval_static<'t, T: Real>(
    field: &StaticField<Var<'t, T>>,
    arch: &ArchConfig,
    x: Var<'t, T>,
    d: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let n = check_rows(&x, 3, "static positions")?;
    if check_rows(&d, 3, "static directions")? != n {
        return Err(Error::LengthMismatch { what: "static directions", expected: n, actual: d.shape()[0] });
    }
    for row in d.value().data().chunks_exact(3) {
        let norm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::NonUnitDirection(norm));
        }
    }
    let enc = arch.encoding;
    let h = trunk(&field.trunk, encode_var(x, enc.l_pos, enc.include_input)?, arch.skip)?;
    let sigma = h.linear(field.sigma.w, field.sigma.b)?.softplus()?;
    let feature = h.linear(field.feature.w, field.feature.b)?;
    let dir = encode_var(d, enc.l_dir, enc.include_input)?;
    let hc = Var::concat(&[feature, dir], 1)?
        .linear(field.color_hidden.w, field.color_hidden.b)?
        .relu()?;
    let color = hc.linear(field.color.w, field.color.b)?.sigmoid()?;
    Ok((sigma, color))
}

/// Per-sample output of the dynamic field.
#[derive(Clone, Copy, Debug)]
pub struct DynamicOutput<'t, T: Real> {
    /// `[n, 1]`
    pub sigma: Var<'t, T>,
    /// `[n, 3]`
    pub color: Var<'t, T>,
    /// Forward flow already damped by `1 − b`, `[n, 3]`.
    pub flow_fw: Var<'t, T>,
    /// Backward flow already damped by `1 − b`, `[n, 3]`.
    pub flow_bw: Var<'t, T>,
    /// `[n, 1]`
    pub blend: Var<'t, T>,
}

impl<'t, T: Real> DynamicOutput<'t, T> {
    /// Rows `indices` of every field.
    pub fn gather(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            sigma: self.sigma.gather(indices)?,
            color: self.color.gather(indices)?,
            flow_fw: self.flow_fw.gather(indices)?,
            flow_bw: self.flow_bw.gather(indices)?,
            blend: self.blend.gather(indices)?,
        })
    }
}

/// Dynamic field at positions `x: [n, 3]` and normalized times `t: [n, 1]`.
pub fn eval_dynamic<'t, T: Real>(
    field: &DynamicField<Var<'t, T>>,
    arch: &ArchConfig,
    x: Var<'t, T>,
    t: Var<'t, T>,
) -> Result<DynamicOutput<'t, T>> {
    let n = check_rows(&x, 3, "dynamic positions")?;
    if check_rows(&t, 1, "dynamic times")? != n {
        return Err(Error::LengthMismatch { what: "dynamic times", expected: n, actual: t.shape()[0] });
    }
    if let Some(bad) = t.value().data().iter().map(|v| v.as_f64()).find(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::TimeOutOfRange(bad));
    }
    let enc = arch.encoding;
    let input = Var::concat(
        &[encode_var(x, enc.l_pos, enc.include_input)?, encode_var(t, enc.l_time, enc.include_input)?],
        1,
    )?;
    let h = trunk(&field.trunk, input, arch.skip)?;
    let sigma = h.linear(field.sigma.w, field.sigma.b)?.softplus()?;
    let color = h.linear(field.color.w, field.color.b)?.sigmoid()?;
    let blend = h.linear(field.blend.w, field.blend.b)?.sigmoid()?;
    let flow = h.linear(field.flow.w, field.flow.b)?.tanh()?.scale(arch.flow_scale)?;
    let keep = blend.one_minus()?.expand_last(3)?;
    Ok(DynamicOutput {
        sigma,
        color,
        flow_fw: flow.slice(1, 0, 3)?.mul(keep)?,
        flow_bw: flow.slice(1, 3, 6)?.mul(keep)?,
        blend,
    })
}
