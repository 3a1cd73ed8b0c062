//! Rendering, induced flow and losses with the synthetic scene's exact
//! densities, colors and flows put in place of the networks.

use dnerf_autodiff::{Tape, Tensor, Var};
use dnerf_core::camera::{generate_rays, Camera, Ray};
use dnerf_core::data::synth::{synth_scene, DynamicSample, GroundTruth, Synthetic, SyntheticSpec};
use dnerf_core::fields::DynamicOutput;
use dnerf_core::losses::{consistency_3d, dynamic_photometric};
use dnerf_core::render::{composite, composite_blend, SampleSet};
use dnerf_core::sceneflow::induced_flow;
use dnerf_core::view::RenderMode;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const K: usize = 512;

fn scene() -> Synthetic {
    synth_scene(&SyntheticSpec::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
}

fn sphere_pixels(s: &Synthetic, frame: usize) -> Vec<usize> {
    let f = &s.dataset.frames[frame];
    (0..f.mask.len()).filter(|&p| f.mask[p] == 1.0).collect()
}

fn positions(rays: &[Ray], samples: &SampleSet) -> Vec<Vector3<f64>> {
    (0..samples.len()).map(|i| rays[i / samples.k].origin + rays[i / samples.k].dir * samples.depths[i]).collect()
}

/// Oracle dynamic medium sampled at `points` and time `t`, as field
/// outputs on the tape.
fn dynamic_outputs<'t>(tape: &'t Tape<f64>, truth: &GroundTruth, points: &[Vector3<f64>], t: f64) -> DynamicOutput<'t, f64> {
    let vals: Vec<DynamicSample> = points.iter().map(|x| truth.dynamic_medium(x, t)).collect();
    let n = vals.len();
    let c = |cols: usize, f: &dyn Fn(&DynamicSample, usize) -> f64| {
        tape.constant(Tensor::from_fn([n, cols], |i| f(&vals[i / cols], i % cols))).unwrap()
    };
    DynamicOutput {
        sigma: c(1, &|v, _| v.sigma),
        color: c(3, &|v, j| v.color[j]),
        flow_fw: c(3, &|v, j| v.flow_fw[j]),
        flow_bw: c(3, &|v, j| v.flow_bw[j]),
        blend: c(1, &|v, _| v.blend),
    }
}

fn bounds(cam: &Camera, n: usize) -> Vec<(f64, f64)> {
    vec![(cam.near, cam.far); n]
}

fn colors(v: Var<'_, f64>) -> Vec<[f64; 3]> {
    v.value().data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

#[test]
fn induced_flow_matches_analytic_flow_on_sphere_pixels() {
    let s = scene();
    let n = s.dataset.len();
    let mut checked = 0;
    for i in 0..n {
        let frame = &s.dataset.frames[i];
        let cam = &frame.camera;
        let pixels = sphere_pixels(&s, i);
        let rays = generate_rays(cam, i, &pixels).unwrap();
        let samples = SampleSet::partition(&bounds(cam, rays.len()), K).unwrap();
        let points = positions(&rays, &samples);
        let tape = Tape::<f64>::new();
        let out = dynamic_outputs(&tape, &s.truth, &points, s.dataset.time(i));
        let weights = composite(&tape, out.sigma, out.color, &samples).unwrap().weights;
        let source: Vec<[f64; 2]> = pixels.iter().map(|&p| [(p % cam.width) as f64, (p / cam.width) as f64]).collect();
        for (step, flow, map) in [(1isize, out.flow_fw, &frame.flow_fw), (-1, out.flow_bw, &frame.flow_bw)] {
            let j = i as isize + step;
            if j < 0 || j as usize >= n {
                continue;
            }
            let other = &s.dataset.frames[j as usize].camera;
            let cams = vec![other; rays.len()];
            let x = tape.constant(Tensor::from_fn([points.len(), 3], |q| points[q / 3][q % 3])).unwrap();
            let induced = induced_flow(&tape, weights, x.add(flow).unwrap(), &cams, &source, &samples).unwrap();
            let got = induced.flow.value();
            let map = map.as_ref().expect("interior frames carry flow");
            for (r, &p) in pixels.iter().enumerate() {
                assert!(induced.usable[r]);
                for c in 0..2 {
                    let want = map.data[p][c] as f64;
                    let err = (got.data()[2 * r + c] - want).abs();
                    assert!(err < 0.1, "frame {i} step {step} pixel {p}: {} vs {want}", got.data()[2 * r + c]);
                }
                checked += 1;
            }
        }
    }
    assert!(checked > 100, "only {checked} flow vectors checked");
}

/// Dynamic render of frame `i`'s sphere rays at time `i + step`, each sample
/// displaced by the oracle flow.
fn warped_render(s: &Synthetic, i: usize, step: isize) -> (Vec<usize>, Vec<[f64; 3]>) {
    let cam = &s.dataset.frames[i].camera;
    let pixels = sphere_pixels(s, i);
    let rays = generate_rays(cam, i, &pixels).unwrap();
    let samples = SampleSet::partition(&bounds(cam, rays.len()), K).unwrap();
    let points = positions(&rays, &samples);
    let t = s.dataset.time(i);
    let warped: Vec<Vector3<f64>> = points
        .iter()
        .map(|x| {
            let v = s.truth.dynamic_medium(x, t);
            x + Vector3::from(if step > 0 { v.flow_fw } else { v.flow_bw })
        })
        .collect();
    let tape = Tape::<f64>::new();
    let out = dynamic_outputs(&tape, &s.truth, &warped, s.dataset.time((i as isize + step) as usize));
    let color = composite(&tape, out.sigma, out.color, &samples).unwrap().color;
    (pixels, colors(color))
}

#[test]
fn warped_render_at_the_next_time_reproduces_the_frame() {
    let s = scene();
    for i in 0..s.dataset.len() - 1 {
        let (pixels, got) = warped_render(&s, i, 1);
        let image = &s.dataset.frames[i].image;
        for (p, c) in pixels.iter().zip(&got) {
            let want = image.pixel(*p);
            for ch in 0..3 {
                assert!((c[ch] - want[ch]).abs() < 1e-3, "frame {i} pixel {p}: {c:?} vs {want:?}");
            }
        }
    }
}

#[test]
fn dynamic_photometric_loss_vanishes_with_oracle_fields() {
    let s = scene();
    let i = 2;
    let pixels = sphere_pixels(&s, i);
    let target: Vec<[f64; 3]> = pixels.iter().map(|&p| s.dataset.frames[i].image.pixel(p)).collect();
    let tape = Tape::<f64>::new();
    let mut renders = Vec::new();
    for step in [0isize, 1, -1] {
        let color = if step == 0 {
            let cam = &s.dataset.frames[i].camera;
            let rays = generate_rays(cam, i, &pixels).unwrap();
            let samples = SampleSet::partition(&bounds(cam, rays.len()), K).unwrap();
            let out = dynamic_outputs(&tape, &s.truth, &positions(&rays, &samples), s.dataset.time(i));
            composite(&tape, out.sigma, out.color, &samples).unwrap().color
        } else {
            let (_, c) = warped_render(&s, i, step);
            tape.constant(Tensor::from_fn([c.len(), 3], |q| c[q / 3][q % 3])).unwrap()
        };
        renders.push((color, target.clone()));
    }
    let loss = dynamic_photometric(&tape, &renders).unwrap();
    assert!(!loss.skipped);
    assert!(loss.value.item() < 1e-4, "{}", loss.value.item());
}

#[test]
fn consistency_vanishes_for_a_translating_field() {
    let s = scene();
    let truth = &s.truth;
    let v = truth.sphere_flow();
    let i = 1;
    let cam = &s.dataset.frames[i].camera;
    let pixels: Vec<usize> = (0..cam.num_pixels()).step_by(7).collect();
    let rays = generate_rays(cam, i, &pixels).unwrap();
    let samples = SampleSet::partition(&bounds(cam, rays.len()), 64).unwrap();
    let points = positions(&rays, &samples);
    // The whole field moves with the sphere, so every sample has the flow.
    let moved = |step: f64| -> Vec<Vector3<f64>> { points.iter().map(|x| x + v * step).collect() };
    let tape = Tape::<f64>::new();
    let here = dynamic_outputs(&tape, truth, &points, s.dataset.time(i));
    let fw = dynamic_outputs(&tape, truth, &moved(1.0), s.dataset.time(i + 1));
    let bw = dynamic_outputs(&tape, truth, &moved(-1.0), s.dataset.time(i - 1));
    let all: Vec<usize> = (0..rays.len()).collect();
    let inside = here.sigma.value().data().iter().filter(|&&x| x > 0.0).count();
    assert!(inside > 0);
    let loss = consistency_3d(&tape, &here, Some((&fw, &all)), Some((&bw, &all)), samples.k).unwrap();
    assert!(loss.value.item().abs() < 1e-6, "{}", loss.value.item());
}

#[test]
fn blended_oracle_media_match_the_traced_image() {
    let s = scene();
    let truth = &s.truth;
    for i in [0, 3] {
        let cam = &s.dataset.frames[i].camera;
        let t = s.dataset.time(i);
        let pixels: Vec<usize> = (0..cam.num_pixels()).collect();
        let rays = generate_rays(cam, i, &pixels).unwrap();
        let samples = SampleSet::partition(&bounds(cam, rays.len()), K).unwrap();
        let points = positions(&rays, &samples);
        let tape = Tape::<f64>::new();
        let dynamic = dynamic_outputs(&tape, truth, &points, t);
        let stat: Vec<(f64, [f64; 3])> = points.iter().map(|x| truth.static_medium(x)).collect();
        let n = stat.len();
        let sigma_s = tape.constant(Tensor::from_fn([n, 1], |q| stat[q].0)).unwrap();
        let color_s = tape.constant(Tensor::from_fn([n, 3], |q| stat[q / 3].1[q % 3])).unwrap();
        let out = composite_blend(&tape, sigma_s, color_s, dynamic.sigma, dynamic.color, dynamic.blend, &samples).unwrap();
        let got = colors(out.color);
        let want = truth.image(cam, t, RenderMode::Full).unwrap();
        let mut worst = 0.0f64;
        for (p, c) in got.iter().enumerate() {
            let w = want.pixel(p);
            for ch in 0..3 {
                worst = worst.max((c[ch] - w[ch]).abs());
            }
        }
        assert!(worst < 1e-3, "frame {i}: worst channel error {worst}");
    }
}

