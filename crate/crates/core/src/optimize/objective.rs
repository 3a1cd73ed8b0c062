//! Ray batches and the full training objective on one tape.

use dnerf_autodiff::{Real, Tape, Var};
use rand::Rng;

use crate::camera::{Camera, Ray};
use crate::data::SceneDataset;
use crate::error::Result;
use crate::fields::{ArchConfig, BoundFields};
use crate::losses::{
    consistency_3d, depth_order, depth_scale_shift, dynamic_photometric, flow_regularizers, full_photometric,
    motion_matching, sparsity, static_photometric, total_loss, DepthMode, FlowField, FlowPair, LossReport, LossTerms,
    LossWeights, NeighborFlows,
};
use crate::render::{render_dynamic, render_full, SampleSet};
use crate::sceneflow::{induced_flow, warp_points};

/// Training rays with everything the losses compare them against.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Sorted by frame.
    pub rays: Vec<Ray>,
    pub samples: SampleSet,
    pub times: Vec<f64>,
    pub target: Vec<[f64; 3]>,
    pub mask: Vec<f64>,
    /// Estimated flow to the next / previous frame, where that frame exists
    /// and flow is available.
    pub flow_fw: Vec<Option<[f64; 2]>>,
    pub flow_bw: Vec<Option<[f64; 2]>>,
    /// Monocular depth, when available.
    pub depth: Option<Vec<f64>>,
    /// Same-image ray pairs for the depth term.
    pub depth_pairs: Vec<(usize, usize)>,
    /// Batch indices of the rays of each image.
    pub groups: Vec<Vec<usize>>,
}

impl Batch {
    /// Rays at the given `(frame, pixel)` pairs, sampled by `samples`.
    pub fn from_pixels(dataset: &SceneDataset, picks: &[(usize, usize)], samples: SampleSet) -> Result<Self> {
        let n = dataset.len();
        let mut rays = Vec::with_capacity(picks.len());
        let (mut target, mut mask, mut times) = (Vec::new(), Vec::new(), Vec::new());
        let (mut flow_fw, mut flow_bw) = (Vec::new(), Vec::new());
        let mut depth = dataset.has_depth.then(Vec::new);
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut last_frame = None;
        for (i, &(f, p)) in picks.iter().enumerate() {
            let frame = &dataset.frames[f];
            rays.push(frame.camera.ray(f, p)?);
            target.push(frame.image.pixel(p));
            mask.push(frame.mask[p]);
            times.push(dataset.time(f));
            let flow = |m: &Option<crate::data::FlowMap>, exists: bool| {
                m.as_ref().filter(|_| exists && dataset.has_flow).map(|m| m.data[p].map(|v| v as f64))
            };
            flow_fw.push(flow(&frame.flow_fw, f + 1 < n));
            flow_bw.push(flow(&frame.flow_bw, f > 0));
            if let Some(d) = &mut depth {
                d.push(frame.depth.as_ref().map_or(0.0, |m| m.data[p] as f64));
            }
            if last_frame != Some(f) {
                groups.push(Vec::new());
                last_frame = Some(f);
            }
            groups.last_mut().expect("group pushed").push(i);
        }
        Ok(Self { rays, samples, times, target, mask, flow_fw, flow_bw, depth, depth_pairs: Vec::new(), groups })
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Draws `rays` pixels uniformly over all frames and pixels, jittered
/// stratified samples along them, and `depth_pairs` same-image pairs.
pub fn sample_batch<R: Rng>(
    dataset: &SceneDataset,
    rays: usize,
    k: usize,
    depth_pairs: usize,
    rng: &mut R,
) -> Result<Batch> {
    let per_frame = dataset.width * dataset.height;
    let mut picks: Vec<(usize, usize)> = (0..rays)
        .map(|_| {
            let i = rng.gen_range(0..dataset.len() * per_frame);
            (i / per_frame, i % per_frame)
        })
        .collect();
    picks.sort_by_key(|p| p.0);
    let bounds: Vec<(f64, f64)> = picks
        .iter()
        .map(|&(f, _)| (dataset.frames[f].camera.near, dataset.frames[f].camera.far))
        .collect();
    let samples = SampleSet::stratified(&bounds, k, Some(rng))?;
    let mut batch = Batch::from_pixels(dataset, &picks, samples)?;
    let usable: Vec<&Vec<usize>> = batch.groups.iter().filter(|g| g.len() >= 2).collect();
    if !usable.is_empty() {
        for _ in 0..depth_pairs {
            let g = usable[rng.gen_range(0..usable.len())];
            let a = rng.gen_range(0..g.len());
            let mut b = rng.gen_range(0..g.len() - 1);
            if b >= a {
                b += 1;
            }
            batch.depth_pairs.push((g[a], g[b]));
        }
    }
    Ok(batch)
}

/// Settings of the objective besides the parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub depth_mode: DepthMode,
}

fn pick<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

/// Every loss term on one batch and their weighted total.
pub fn objective<'t, T: Real>(
    tape: &'t Tape<T>,
    fields: &BoundFields<'t, T>,
    arch: &ArchConfig,
    dataset: &SceneDataset,
    batch: &Batch,
    cfg: &ObjectiveConfig,
) -> Result<(Var<'t, T>, LossReport)> {
    let terms = loss_terms(tape, fields, arch, dataset, batch, cfg.depth_mode)?;
    total_loss(tape, &terms, &cfg.weights)
}

/// The unweighted loss terms on one batch.
pub fn loss_terms<'t, T: Real>(
    tape: &'t Tape<T>,
    fields: &BoundFields<'t, T>,
    arch: &ArchConfig,
    dataset: &SceneDataset,
    batch: &Batch,
    depth_mode: DepthMode,
) -> Result<LossTerms<Var<'t, T>>> {
    let n = dataset.len();
    let k = batch.samples.k;
    let render = render_full(tape, fields, arch, &batch.rays, &batch.samples, &batch.times)?;
    let dynamic = render.dynamic;
    let x = tape.constant(batch.samples.positions(&batch.rays)?)?;

    let l_static = static_photometric(tape, render.static_pass.color, &batch.target, &batch.mask)?;
    let l_full = full_photometric(tape, render.full.color, &batch.target)?;

    // Renders and field queries at the neighboring times along warped
    // sample positions, with the original gaps.
    struct Neighbor<'t, T: Real> {
        rays: Vec<usize>,
        color: Var<'t, T>,
        out: crate::fields::DynamicOutput<'t, T>,
        warped: Var<'t, T>,
    }
    let neighbor = |step: isize| -> Result<Option<Neighbor<'t, T>>> {
        let rays: Vec<usize> = (0..batch.len())
            .filter(|&r| {
                let f = batch.rays[r].frame as isize + step;
                f >= 0 && (f as usize) < n
            })
            .collect();
        if rays.is_empty() {
            return Ok(None);
        }
        let rows = batch.samples.sample_rows(&rays);
        let flow = if step > 0 { dynamic.flow_fw } else { dynamic.flow_bw }.gather(&rows)?;
        let sub = batch.samples.subset(&rays);
        let sub_rays = pick(&batch.rays, &rays);
        let times: Vec<f64> = rays.iter().map(|&r| dataset.time((batch.rays[r].frame as isize + step) as usize)).collect();
        let (out_render, out) = render_dynamic(tape, &fields.dynamic_field, arch, &sub_rays, &sub, &times, Some(flow))?;
        let warped = warp_points(x.gather(&rows)?, flow)?;
        Ok(Some(Neighbor { rays, color: out_render.color, out, warped }))
    };
    let fw = neighbor(1)?;
    let bw = neighbor(-1)?;

    let mut renders = vec![(render.dynamic_pass.color, batch.target.clone())];
    for nb in [&fw, &bw].into_iter().flatten() {
        renders.push((nb.color, pick(&batch.target, &nb.rays)));
    }
    let l_dyn = dynamic_photometric(tape, &renders)?;

    let neighbors = NeighborFlows {
        fw_rays: fw.as_ref().map_or_else(Vec::new, |nb| nb.rays.clone()),
        bw_rays: bw.as_ref().map_or_else(Vec::new, |nb| nb.rays.clone()),
        bw_at_fw: fw.as_ref().map(|nb| nb.out.flow_bw),
        fw_at_bw: bw.as_ref().map(|nb| nb.out.flow_fw),
    };
    let [l_slow, l_temporal, l_spatial, l_cycle] =
        flow_regularizers(tape, FlowField { fw: dynamic.flow_fw, bw: dynamic.flow_bw }, &neighbors, k)?;

    // Motion matching against the estimated flow, with the dynamic
    // rendering weights at the current time.
    let mut pairs = Vec::new();
    for (nb, step, est) in [(&fw, 1isize, &batch.flow_fw), (&bw, -1isize, &batch.flow_bw)] {
        let Some(nb) = nb else { continue };
        let rays: Vec<usize> = nb.rays.iter().copied().filter(|&r| est[r].is_some()).collect();
        if rays.is_empty() {
            continue;
        }
        let local: Vec<usize> = nb.rays.iter().enumerate().filter(|(_, r)| est[**r].is_some()).map(|(i, _)| i).collect();
        let sub = batch.samples.subset(&rays);
        let cams: Vec<&Camera> = rays
            .iter()
            .map(|&r| &dataset.frames[(batch.rays[r].frame as isize + step) as usize].camera)
            .collect();
        let source: Vec<[f64; 2]> = rays
            .iter()
            .map(|&r| {
                let ray = &batch.rays[r];
                let w = dataset.width;
                [(ray.pixel % w) as f64, (ray.pixel / w) as f64]
            })
            .collect();
        let weights = render.dynamic_pass.weights.gather(&rays)?;
        let local_rows: Vec<usize> = local.iter().flat_map(|&i| i * k..(i + 1) * k).collect();
        let warped = nb.warped.gather(&local_rows)?;
        let induced = induced_flow(tape, weights, warped, &cams, &source, &sub)?;
        pairs.push(FlowPair {
            induced: induced.flow,
            estimated: rays.iter().map(|&r| est[r].expect("filtered")).collect(),
            usable: induced.usable,
        });
    }
    let l_motion = motion_matching(tape, &pairs)?;

    let l_sparsity = sparsity(render.dynamic_pass.weights)?;

    let l_depth = match (&batch.depth, depth_mode) {
        (None, _) => tape.scalar(T::zero())?,
        (Some(reference), DepthMode::Order) => {
            depth_order(tape, render.dynamic_pass.depth, reference, &batch.depth_pairs)?.value
        }
        (Some(reference), DepthMode::ScaleShift) => {
            depth_scale_shift(
                tape,
                render.dynamic_pass.depth,
                render.static_pass.depth,
                reference,
                &batch.mask,
                &batch.groups,
            )?
            .value
        }
    };

    let l_consistency = consistency_3d(
        tape,
        &dynamic,
        fw.as_ref().map(|nb| (&nb.out, nb.rays.as_slice())),
        bw.as_ref().map(|nb| (&nb.out, nb.rays.as_slice())),
        k,
    )?;

    Ok(LossTerms {
        static_photometric: l_static.value,
        dynamic_photometric: l_dyn.value,
        full_photometric: l_full.value,
        motion: l_motion.value,
        slow: l_slow.value,
        temporal_smooth: l_temporal.value,
        spatial_smooth: l_spatial.value,
        cycle: l_cycle.value,
        sparsity: l_sparsity,
        depth: l_depth,
        consistency_3d: l_consistency.value,
    })
}
