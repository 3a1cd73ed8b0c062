//! The eleven terms of the training objective and their weighted sum.
//!
//! Every term is a mean over the rays or samples it covers, so the weights
//! do not depend on the batch size.

use dnerf_autodiff::{Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::DynamicOutput;

/// One value per loss term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<V> {
    pub static_photometric: V,
    pub dynamic_photometric: V,
    pub full_photometric: V,
    pub motion: V,
    pub slow: V,
    pub temporal_smooth: V,
    pub spatial_smooth: V,
    pub cycle: V,
    pub sparsity: V,
    pub depth: V,
    pub consistency_3d: V,
}

pub type LossWeights = LossTerms<f64>;

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            static_photometric: 1.0,
            dynamic_photometric: 1.0,
            full_photometric: 1.0,
            motion: 0.5,
            slow: 1.0,
            temporal_smooth: 0.05,
            spatial_smooth: 0.05,
            cycle: 0.05,
            sparsity: 0.05,
            depth: 0.05,
            consistency_3d: 0.05,
        }
    }
}

impl<V> LossTerms<V> {
    pub fn entries(&self) -> [(&'static str, &V); 11] {
        [
            ("static", &self.static_photometric),
            ("dynamic", &self.dynamic_photometric),
            ("full", &self.full_photometric),
            ("motion", &self.motion),
            ("slow", &self.slow),
            ("temporal_smooth", &self.temporal_smooth),
            ("spatial_smooth", &self.spatial_smooth),
            ("cycle", &self.cycle),
            ("sparsity", &self.sparsity),
            ("depth", &self.depth),
            ("consistency_3d", &self.consistency_3d),
        ]
    }

    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> LossTerms<U> {
        LossTerms {
            static_photometric: f(&self.static_photometric),
            dynamic_photometric: f(&self.dynamic_photometric),
            full_photometric: f(&self.full_photometric),
            motion: f(&self.motion),
            slow: f(&self.slow),
            temporal_smooth: f(&self.temporal_smooth),
            spatial_smooth: f(&self.spatial_smooth),
            cycle: f(&self.cycle),
            sparsity: f(&self.sparsity),
            depth: f(&self.depth),
            consistency_3d: f(&self.consistency_3d),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        match self.entries().iter().find(|(_, w)| !(**w >= 0.0 && w.is_finite())) {
            Some((name, w)) => Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {w}"))),
            None => Ok(()),
        }
    }

    pub fn dot(&self, terms: &LossTerms<f64>) -> f64 {
        self.entries().iter().zip(terms.entries()).map(|((_, w), (_, v))| **w * *v).sum()
    }
}

/// A loss term and whether it had nothing to measure (and is therefore 0).
#[derive(Clone, Copy, Debug)]
pub struct Term<'t, T: Real> {
    pub value: Var<'t, T>,
    pub skipped: bool,
}

impl<'t, T: Real> Term<'t, T> {
    fn active(value: Var<'t, T>) -> Self {
        Self { value, skipped: false }
    }

    fn zero(tape: &'t Tape<T>) -> Result<Self> {
        Ok(Self { value: tape.scalar(T::zero())?, skipped: true })
    }
}

/// Per-iteration log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    pub terms: LossTerms<f64>,
    pub total: f64,
}

impl LossReport {
    /// One JSON object on one line.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("loss report serializes")
    }
}

/// `Σ v ⊙ w` for a constant weighting `w` of the same shape as `v`.
fn weighted_sum<'t, T: Real>(tape: &'t Tape<T>, v: Var<'t, T>, w: Vec<f64>) -> Result<Var<'t, T>> {
    let w = Tensor::new(v.shape(), w.into_iter().map(T::of).collect())?;
    Ok(v.mul(tape.constant(w)?)?.sum()?)
}

fn rgb_target<T: Real>(target: &[[f64; 3]]) -> Result<Tensor<T>> {
    Ok(Tensor::new([target.len(), 3], target.iter().flatten().map(|&v| T::of(v)).collect())?)
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::LengthMismatch { what, expected, actual });
    }
    Ok(())
}

/// Mean squared color error over rays with `mask == 0` (static rays).
pub fn static_photometric<'t, T: Real>(
    tape: &'t Tape<T>,
    color: Var<'t, T>,
    target: &[[f64; 3]],
    mask: &[f64],
) -> Result<Term<'t, T>> {
    check_len("static targets", color.shape()[0], target.len())?;
    check_len("masks", target.len(), mask.len())?;
    let n_static = mask.iter().filter(|&&m| m == 0.0).count();
    if n_static == 0 {
        return Term::zero(tape);
    }
    let sq = color.sub(tape.constant(rgb_target(target)?)?)?.square()?;
    let scale = 1.0 / (3 * n_static) as f64;
    let w = mask.iter().flat_map(|&m| [(1.0 - m) * scale; 3]).collect();
    Ok(Term::active(weighted_sum(tape, sq, w)?))
}

/// Mean squared color error over all rays.
pub fn full_photometric<'t, T: Real>(tape: &'t Tape<T>, color: Var<'t, T>, target: &[[f64; 3]]) -> Result<Term<'t, T>> {
    check_len("targets", color.shape()[0], target.len())?;
    if target.is_empty() {
        return Term::zero(tape);
    }
    Ok(Term::active(color.sub(tape.constant(rgb_target(target)?)?)?.square()?.mean()?))
}

/// Sum over the available render times of the mean squared error against
/// the current frame. Each entry pairs a render of some rays with those
/// rays' target colors.
pub fn dynamic_photometric<'t, T: Real>(
    tape: &'t Tape<T>,
    renders: &[(Var<'t, T>, Vec<[f64; 3]>)],
) -> Result<Term<'t, T>> {
    let mut total: Option<Var<'t, T>> = None;
    for (color, target) in renders.iter().filter(|(_, t)| !t.is_empty()) {
        let term = full_photometric(tape, *color, target)?.value;
        total = Some(match total {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    match total {
        Some(v) => Ok(Term::active(v)),
        None => Term::zero(tape),
    }
}

/// Induced flow of some rays in one direction with the estimated flow at
/// those rays and which of them count.
#[derive(Clone, Debug)]
pub struct FlowPair<'t, T: Real> {
    /// `[n, 2]`
    pub induced: Var<'t, T>,
    pub estimated: Vec<[f64; 2]>,
    pub usable: Vec<bool>,
}

/// Mean absolute flow difference per component over every usable
/// (ray, direction) pair.
pub fn motion_matching<'t, T: Real>(tape: &'t Tape<T>, pairs: &[FlowPair<'t, T>]) -> Result<Term<'t, T>> {
    let count: usize = pairs.iter().map(|p| p.usable.iter().filter(|&&u| u).count()).sum();
    if count == 0 {
        return Term::zero(tape);
    }
    let scale = 1.0 / (2 * count) as f64;
    let mut total: Option<Var<'t, T>> = None;
    for p in pairs {
        check_len("estimated flow", p.induced.shape()[0], p.estimated.len())?;
        check_len("flow usability", p.estimated.len(), p.usable.len())?;
        if p.estimated.is_empty() {
            continue;
        }
        let est = Tensor::new([p.estimated.len(), 2], p.estimated.iter().flatten().map(|&v| T::of(v)).collect())?;
        let err = p.induced.sub(tape.constant(est)?)?.abs()?;
        let w = p.usable.iter().flat_map(|&u| [if u { scale } else { 0.0 }; 2]).collect();
        let s = weighted_sum(tape, err, w)?;
        total = Some(match total {
            Some(acc) => acc.add(s)?,
            None => s,
        });
    }
    Ok(Term::active(total.expect("count > 0 implies a nonempty pair")))
}

/// Scene flow at the samples of the current frame, and the flow queried at
/// the warped positions for the cycle term.
#[derive(Clone, Copy, Debug)]
pub struct FlowField<'t, T: Real> {
    /// Forward flow at every sample, `[R*K, 3]`.
    pub fw: Var<'t, T>,
    /// Backward flow at every sample, `[R*K, 3]`.
    pub bw: Var<'t, T>,
}

/// Rays (by batch index) with a forward / backward neighbor, and the flow
/// predicted back from those neighbors.
#[derive(Clone, Debug)]
pub struct NeighborFlows<'t, T: Real> {
    pub fw_rays: Vec<usize>,
    pub bw_rays: Vec<usize>,
    /// `s_bw(x + s_fw, t + 1)` at the samples of `fw_rays`, if computed.
    pub bw_at_fw: Option<Var<'t, T>>,
    /// `s_fw(x + s_bw, t − 1)` at the samples of `bw_rays`, if computed.
    pub fw_at_bw: Option<Var<'t, T>>,
}

/// `(slow, temporal smooth, spatial smooth, cycle)`.
pub fn flow_regularizers<'t, T: Real>(
    tape: &'t Tape<T>,
    flow: FlowField<'t, T>,
    neighbors: &NeighborFlows<'t, T>,
    k: usize,
) -> Result<[Term<'t, T>; 4]> {
    let rows = |rays: &[usize]| -> Vec<usize> { rays.iter().flat_map(|&r| r * k..(r + 1) * k).collect() };
    let fw_rows = rows(&neighbors.fw_rays);
    let bw_rows = rows(&neighbors.bw_rays);
    let both: Vec<usize> = neighbors.fw_rays.iter().copied().filter(|r| neighbors.bw_rays.contains(r)).collect();
    let both_rows = rows(&both);

    let fw = (!fw_rows.is_empty()).then(|| flow.fw.gather(&fw_rows)).transpose()?;
    let bw = (!bw_rows.is_empty()).then(|| flow.bw.gather(&bw_rows)).transpose()?;

    // Pooled mean of per-sample quantities over both directions.
    let pooled = |parts: Vec<(Var<'t, T>, usize)>| -> Result<Term<'t, T>> {
        let count: usize = parts.iter().map(|p| p.1).sum();
        if count == 0 {
            return Term::zero(tape);
        }
        let mut total: Option<Var<'t, T>> = None;
        for (v, _) in parts {
            let s = v.sum()?;
            total = Some(match total {
                Some(acc) => acc.add(s)?,
                None => s,
            });
        }
        Ok(Term::active(total.expect("nonempty").scale(1.0 / count as f64)?))
    };

    let mut slow_parts = Vec::new();
    let mut spatial_parts = Vec::new();
    let mut cycle_parts = Vec::new();
    for (flow_dir, rays, back) in [
        (fw, &neighbors.fw_rays, neighbors.bw_at_fw),
        (bw, &neighbors.bw_rays, neighbors.fw_at_bw),
    ] {
        let Some(f) = flow_dir else { continue };
        let n = rays.len();
        slow_parts.push((f.abs()?, n * k));
        if k > 1 {
            let grid = f.reshape([n, k, 3])?;
            let d = grid.slice(1, 0, k - 1)?.sub(grid.slice(1, 1, k)?)?.abs()?;
            spatial_parts.push((d, n * (k - 1)));
        }
        if let Some(b) = back {
            cycle_parts.push((f.add(b)?.square()?, n * k));
        }
    }
    let temporal = if both_rows.is_empty() {
        Term::zero(tape)?
    } else {
        let s = flow.fw.gather(&both_rows)?.add(flow.bw.gather(&both_rows)?)?.square()?;
        Term::active(s.sum()?.scale(1.0 / both_rows.len() as f64)?)
    };
    Ok([pooled(slow_parts)?, temporal, pooled(spatial_parts)?, pooled(cycle_parts)?])
}

/// Entropy of each ray's normalized weight distribution, averaged over rays.
pub fn sparsity<'t, T: Real>(weights: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = weights.shape();
    if s.len() != 2 {
        return Err(Error::LengthMismatch { what: "weight matrix rank", expected: 2, actual: s.len() });
    }
    let (r, k) = (s[0], s[1]);
    // Division clamps the denominator at ε, so all-zero rows give p = 0.
    let total = weights.sum_axis(1)?.reshape([r, 1])?.expand_last(k)?;
    let p = weights.div(total)?;
    let plogp = p.mul(p.log()?)?;
    Ok(plogp.sum_axis(1)?.mean()?.neg()?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthMode {
    /// Pairwise ranking against the order of the monocular depths.
    #[default]
    Order,
    /// Median/MAD-normalized squared error plus static-region agreement
    /// with the static field's depth.
    ScaleShift,
}

impl std::str::FromStr for DepthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "order" => Ok(Self::Order),
            "scale-shift" => Ok(Self::ScaleShift),
            other => Err(Error::Config(format!("unknown depth mode {other:?} (expected order or scale-shift)"))),
        }
    }
}

/// Mean over pairs `(i, j)` of `log(1 + exp(D_j − D_i))` when the reference
/// depth of `i` is at least that of `j`, else `log(1 + exp(D_i − D_j))`.
pub fn depth_order<'t, T: Real>(
    tape: &'t Tape<T>,
    depth: Var<'t, T>,
    reference: &[f64],
    pairs: &[(usize, usize)],
) -> Result<Term<'t, T>> {
    check_len("reference depths", depth.shape()[0], reference.len())?;
    if pairs.is_empty() {
        return Term::zero(tape);
    }
    let first: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let second: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let diff = depth.gather(&second)?.sub(depth.gather(&first)?)?;
    let sign = Tensor::from_fn([pairs.len(), 1], |i| {
        let (a, b) = pairs[i];
        if reference[a] >= reference[b] {
            T::one()
        } else {
            -T::one()
        }
    });
    Ok(Term::active(diff.mul(tape.constant(sign)?)?.softplus()?.mean()?))
}

fn median_index(values: &[f64], rows: &[usize]) -> usize {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    sorted[(sorted.len() - 1) / 2]
}

/// Scale-and-shift invariant depth term. `groups` lists the rays of each
/// image; rays with `mask == 0` also pull the dynamic depth towards the
/// static one.
pub fn depth_scale_shift<'t, T: Real>(
    tape: &'t Tape<T>,
    dynamic_depth: Var<'t, T>,
    static_depth: Var<'t, T>,
    reference: &[f64],
    mask: &[f64],
    groups: &[Vec<usize>],
) -> Result<Term<'t, T>> {
    let n = dynamic_depth.shape()[0];
    check_len("reference depths", n, reference.len())?;
    check_len("masks", n, mask.len())?;
    let eps = dnerf_autodiff::GUARD_EPS;
    let mut parts: Vec<Var<'t, T>> = Vec::new();
    let mut count = 0usize;
    for rows in groups.iter().filter(|g| g.len() >= 2) {
        let d = dynamic_depth.gather(rows)?;
        let values: Vec<f64> = d.value().data().iter().map(|v| v.as_f64()).collect();
        let local: Vec<usize> = (0..rows.len()).collect();
        let med = d.gather(&[median_index(&values, &local)])?.reshape([1])?;
        let centered = d.sub(med.broadcast(rows.len())?.reshape([rows.len(), 1])?)?;
        let mad = centered.abs()?.mean()?.add_scalar(eps)?;
        let normalized = centered.div(mad.broadcast(rows.len())?.reshape([rows.len(), 1])?)?;

        let r: Vec<f64> = rows.iter().map(|&i| reference[i]).collect();
        let r_med = r[median_index(&r, &local)];
        let r_mad = r.iter().map(|v| (v - r_med).abs()).sum::<f64>() / r.len() as f64 + eps;
        let target = Tensor::from_fn([rows.len(), 1], |i| T::of((r[i] - r_med) / r_mad));
        parts.push(normalized.sub(tape.constant(target)?)?.square()?.sum()?);
        count += rows.len();
    }
    let mut total: Option<Var<'t, T>> = None;
    for p in parts {
        let s = p.scale(1.0 / count as f64)?;
        total = Some(match total {
            Some(acc) => acc.add(s)?,
            None => s,
        });
    }
    let n_static = mask.iter().filter(|&&m| m == 0.0).count();
    if n_static > 0 {
        let sq = dynamic_depth.sub(static_depth)?.square()?;
        let w = mask.iter().map(|&m| (1.0 - m) / n_static as f64).collect();
        let s = weighted_sum(tape, sq, w)?;
        total = Some(match total {
            Some(acc) => acc.add(s)?,
            None => s,
        });
    }
    match total {
        Some(v) => Ok(Term::active(v)),
        None => Term::zero(tape),
    }
}

/// Squared color and density differences between each sample and its
/// scene-flow neighbors, pooled over the available (sample, direction)
/// pairs. `center` holds the current-time outputs at every sample;
/// `warped_fw` / `warped_bw` the neighbor-time outputs at the samples of
/// `fw_rays` / `bw_rays`.
pub fn consistency_3d<'t, T: Real>(
    tape: &'t Tape<T>,
    center: &DynamicOutput<'t, T>,
    warped_fw: Option<(&DynamicOutput<'t, T>, &[usize])>,
    warped_bw: Option<(&DynamicOutput<'t, T>, &[usize])>,
    k: usize,
) -> Result<Term<'t, T>> {
    let mut sums = Vec::new();
    let mut count = 0usize;
    for (warped, rays) in [warped_fw, warped_bw].into_iter().flatten() {
        if rays.is_empty() {
            continue;
        }
        let rows: Vec<usize> = rays.iter().flat_map(|&r| r * k..(r + 1) * k).collect();
        let here = center.gather(&rows)?;
        let dc = here.color.sub(warped.color)?.square()?.sum()?;
        let ds = here.sigma.sub(warped.sigma)?.square()?.sum()?;
        sums.push(dc.add(ds)?);
        count += rows.len();
    }
    if count == 0 {
        return Term::zero(tape);
    }
    let mut total = sums[0];
    for s in &sums[1..] {
        total = total.add(*s)?;
    }
    Ok(Term::active(total.scale(1.0 / count as f64)?))
}

/// Weighted sum of the terms and its report (iteration left at 0).
pub fn total_loss<'t, T: Real>(
    tape: &'t Tape<T>,
    terms: &LossTerms<Var<'t, T>>,
    weights: &LossWeights,
) -> Result<(Var<'t, T>, LossReport)> {
    let mut total = tape.scalar(T::zero())?;
    for ((_, v), (_, w)) in terms.entries().iter().zip(weights.entries()) {
        if *w != 0.0 {
            total = total.add(v.scale(*w)?)?;
        }
    }
    let report = LossReport {
        iteration: 0,
        terms: terms.map(|v| v.item().as_f64()),
        total: total.item().as_f64(),
    };
    Ok((total, report))
}
