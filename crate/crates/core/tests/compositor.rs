//! Volume compositing against closed forms.

use dnerf_autodiff::{Tape, Tensor};
use dnerf_core::camera::Ray;
use dnerf_core::fields::{init_params, ArchConfig};
use dnerf_core::render::{composite, composite_blend, render_dynamic, render_full, render_static, SampleSet};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A medium that is constant on `[start, end)` pieces.
struct Layer {
    start: f64,
    end: f64,
    sigma: f64,
    color: [f64; 3],
}

fn layer_at(layers: &[Layer], s: f64) -> Option<&Layer> {
    layers.iter().find(|l| s >= l.start && s < l.end)
}

/// Color and opacity from the layers alone.
fn closed_form(layers: &[Layer]) -> ([f64; 3], f64) {
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    for l in layers {
        let absorbed = 1.0 - (-l.sigma * (l.end - l.start)).exp();
        for c in 0..3 {
            color[c] += trans * absorbed * l.color[c];
        }
        trans *= 1.0 - absorbed;
    }
    (color, 1.0 - trans)
}

fn render_layers(layers: &[Layer], near: f64, far: f64, k: usize) -> ([f64; 3], f64) {
    let samples = SampleSet::partition(&[(near, far)], k).unwrap();
    let tape = Tape::<f64>::new();
    let pick = |s: f64| layer_at(layers, s);
    let sigma = Tensor::from_fn([k, 1], |i| pick(samples.depths[i]).map_or(0.0, |l| l.sigma));
    let color = Tensor::from_fn([k, 3], |i| pick(samples.depths[i / 3]).map_or(0.0, |l| l.color[i % 3]));
    let out = composite(&tape, tape.constant(sigma).unwrap(), tape.constant(color).unwrap(), &samples).unwrap();
    let c = out.color.value();
    ([c.data()[0], c.data()[1], c.data()[2]], out.acc.item())
}

#[test]
fn layered_medium_matches_closed_form_at_64_samples() {
    // Cells are 1/16 wide; every boundary falls on a cell edge.
    let layers = [
        Layer { start: 1.0, end: 2.0, sigma: 3.0, color: [0.9, 0.2, 0.1] },
        Layer { start: 2.0, end: 3.25, sigma: 0.5, color: [0.1, 0.8, 0.3] },
        Layer { start: 3.25, end: 4.0, sigma: 8.0, color: [0.2, 0.3, 1.0] },
    ];
    let (want, opacity) = closed_form(&layers);
    let (got, acc) = render_layers(&layers, 0.0, 4.0, 64);
    for c in 0..3 {
        assert!((got[c] - want[c]).abs() < 1e-5, "channel {c}: {} vs {}", got[c], want[c]);
    }
    assert!((acc - opacity).abs() < 1e-5);
}

/// `∫_near^s σ` for a Gaussian bump of height `a`, center `mu`, width `w`.
fn gaussian_depth(a: f64, mu: f64, w: f64, near: f64, s: f64) -> f64 {
    let k = a * w * (std::f64::consts::PI / 2.0).sqrt();
    let z = |x: f64| libm::erf((x - mu) / (w * std::f64::consts::SQRT_2));
    k * (z(s) - z(near))
}

#[test]
fn smooth_medium_error_shrinks_with_more_samples() {
    let (a, mu, w, near, far) = (6.0, 2.2, 0.35, 1.0, 4.0);
    let sigma = |s: f64| a * (-(s - mu).powi(2) / (2.0 * w * w)).exp();
    let color = |s: f64| [s / 4.0, 1.0 - s / 4.0, 0.5];
    // Reference: exact transmittance, Simpson's rule on T σ c.
    let n = 200_000;
    let h = (far - near) / n as f64;
    let mut want = [0.0; 3];
    for i in 0..=n {
        let s = near + i as f64 * h;
        let f = (-gaussian_depth(a, mu, w, near, s)).exp() * sigma(s);
        let wt = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        for c in 0..3 {
            want[c] += wt * f * color(s)[c] * h / 3.0;
        }
    }
    let mut errors = Vec::new();
    for k in [16, 32, 64, 128] {
        let samples = SampleSet::partition(&[(near, far)], k).unwrap();
        let tape = Tape::<f64>::new();
        let sig = Tensor::from_fn([k, 1], |i| sigma(samples.depths[i]));
        let col = Tensor::from_fn([k, 3], |i| color(samples.depths[i / 3])[i % 3]);
        let out = composite(&tape, tape.constant(sig).unwrap(), tape.constant(col).unwrap(), &samples).unwrap();
        let got = out.color.value();
        let err = (0..3).map(|c| (got.data()[c] - want[c]).abs()).fold(0.0, f64::max);
        errors.push(err);
    }
    assert!(errors.windows(2).all(|p| p[1] < p[0]), "{errors:?}");
    assert!(errors[3] < 1e-2, "{errors:?}");
}

#[test]
fn empty_samples_can_be_inserted_anywhere() {
    let tape = Tape::<f64>::new();
    let base = SampleSet::new(3, vec![0.5, 1.0, 1.5], vec![0.5, 0.5, 0.5], vec![2.0]).unwrap();
    let more = SampleSet::new(5, vec![0.25, 0.5, 0.9, 1.0, 1.5], vec![0.3, 0.5, 0.07, 0.5, 0.5], vec![2.0]).unwrap();
    let constant = |shape: [usize; 2], v: &[f64]| tape.constant(Tensor::from_f64(shape, v).unwrap()).unwrap();
    let a = composite(
        &tape,
        constant([3, 1], &[1.0, 2.0, 0.5]),
        constant([3, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]),
        &base,
    )
    .unwrap();
    let b = composite(
        &tape,
        constant([5, 1], &[0.0, 1.0, 0.0, 2.0, 0.5]),
        constant([5, 3], &[1.0, 1.0, 1.0, 0.1, 0.2, 0.3, 0.0, 1.0, 0.0, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]),
        &more,
    )
    .unwrap();
    for (x, y) in a.color.value().data().iter().zip(b.color.value().data()) {
        assert!((x - y).abs() < 1e-15);
    }
    assert!((a.acc.item() - b.acc.item()).abs() < 1e-15);
    assert!((a.depth.item() - b.depth.item()).abs() < 1e-12);
}

fn random_rays(n: usize, rng: &mut ChaCha8Rng) -> Vec<Ray> {
    (0..n)
        .map(|i| {
            let origin = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let dir = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)).normalize();
            Ray { origin, dir, frame: 0, pixel: i }
        })
        .collect()
}

#[test]
fn blend_extremes_reduce_render_full_to_either_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let arch = ArchConfig::tiny();
    let rays = random_rays(100, &mut rng);
    let bounds: Vec<(f64, f64)> = (0..100).map(|_| (rng.gen_range(0.1..0.5), rng.gen_range(1.0..2.0))).collect();
    let samples = SampleSet::stratified(&bounds, 16, Some(&mut rng)).unwrap();
    let times: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..1.0)).collect();
    for (bias, which) in [(40.0, "static"), (-800.0, "dynamic")] {
        let mut params = init_params::<f64>(3, &arch).unwrap();
        // The blend head starts with zero weights, so the bias alone sets b.
        params.dynamic_field.blend.b = Tensor::full([1], bias);
        let tape = Tape::<f64>::new();
        let fields = params.bind(&tape, false).unwrap();
        let full = render_full(&tape, &fields, &arch, &rays, &samples, &times).unwrap();
        let single = if which == "static" {
            render_static(&tape, &fields.static_field, &arch, &rays, &samples).unwrap()
        } else {
            render_dynamic(&tape, &fields.dynamic_field, &arch, &rays, &samples, &times, None).unwrap().0
        };
        let (a, b) = (full.full.color.value(), single.color.value());
        for (p, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            assert!((x - y).abs() < 1e-6, "{which} ray {} channel {}: {x} vs {y}", p / 3, p % 3);
        }
    }
}

proptest! {
    #[test]
    fn layered_media_on_cell_edges_are_exact(
        cuts in proptest::collection::btree_set(1usize..64, 1..6),
        sigmas in proptest::collection::vec(0.0f64..10.0, 6),
        colors in proptest::collection::vec(0.0f64..1.0, 18),
    ) {
        let (near, far, k) = (0.5, 2.5, 64);
        let cell = (far - near) / k as f64;
        let mut edges: Vec<usize> = vec![0];
        edges.extend(cuts.iter().copied());
        edges.push(k);
        let layers: Vec<Layer> = edges
            .windows(2)
            .enumerate()
            .map(|(i, e)| Layer {
                start: near + e[0] as f64 * cell,
                end: near + e[1] as f64 * cell,
                sigma: sigmas[i],
                color: [colors[3 * i], colors[3 * i + 1], colors[3 * i + 2]],
            })
            .collect();
        let (want, opacity) = closed_form(&layers);
        let (got, acc) = render_layers(&layers, near, far, k);
        for c in 0..3 {
            prop_assert!((got[c] - want[c]).abs() < 1e-5);
        }
        prop_assert!((acc - opacity).abs() < 1e-5);
    }

    #[test]
    fn blended_weights_form_a_sub_distribution(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 12;
        let samples = SampleSet::stratified(&[(0.2, 3.0), (1.0, 1.5)], k, Some(&mut rng)).unwrap();
        let n = samples.len();
        let tape = Tape::<f64>::new();
        let mut rand = |cols: usize, hi: f64| tape.constant(Tensor::from_fn([n, cols], |_| rng.gen_range(0.0..hi))).unwrap();
        let (ss, cs, sd, cd, b) = (rand(1, 5.0), rand(3, 1.0), rand(1, 5.0), rand(3, 1.0), rand(1, 1.0));
        let out = composite_blend(&tape, ss, cs, sd, cd, b, &samples).unwrap();
        let w = out.weights.value();
        prop_assert!(w.data().iter().all(|&x| x >= 0.0));
        for r in 0..2 {
            let total: f64 = w.data()[r * k..(r + 1) * k].iter().sum();
            prop_assert!(total <= 1.0 + 1e-12);
        }
        prop_assert!(out.color.value().data().iter().all(|&c| (0.0..=1.0 + 1e-12).contains(&c)));
    }
}
