//! Reverse-mode gradients of every loss term, and of the weighted total,
//! against central differences on a two-ray batch with tiny networks.

use dnerf_autodiff::{finite_difference_check_many, Tensor, Var};
use dnerf_core::data::synth::{synth_scene, SyntheticSpec};
use dnerf_core::data::SceneDataset;
use dnerf_core::fields::{init_params, ArchConfig, FieldParams};
use dnerf_core::losses::{total_loss, DepthMode, LossTerms, LossWeights};
use dnerf_core::optimize::{loss_terms, objective, Batch, ObjectiveConfig};
use dnerf_core::render::SampleSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOLERANCE: f64 = 1e-5;

struct Setup {
    dataset: SceneDataset,
    params: FieldParams<f64>,
    batch: Batch,
    arch: ArchConfig,
}

fn setup() -> Setup {
    let spec = SyntheticSpec { width: 16, height: 12, focal: 16.0, ..SyntheticSpec::default() };
    let scene = synth_scene(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let dataset = scene.dataset;
    let frame = 2;
    let mask = &dataset.frames[frame].mask;
    // One ray on the sphere, one on the plane, both in an interior frame so
    // every neighbor term is active.
    let on_sphere = (0..mask.len()).find(|&p| mask[p] == 1.0).expect("sphere is visible");
    let on_plane = (0..mask.len()).find(|&p| mask[p] == 0.0).unwrap();
    let cam = &dataset.frames[frame].camera;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let samples = SampleSet::stratified(&[(cam.near, cam.far); 2], 6, Some(&mut rng)).unwrap();
    let mut batch = Batch::from_pixels(&dataset, &[(frame, on_sphere), (frame, on_plane)], samples).unwrap();
    batch.depth_pairs = vec![(0, 1)];

    let arch = ArchConfig::tiny();
    let mut params = init_params::<f64>(4, &arch).unwrap();
    // The flow and blend heads start at zero; give them weights so the
    // flow terms see nonzero, varied flow.
    let d = &mut params.dynamic_field;
    for head in [&mut d.flow, &mut d.blend] {
        let shape = head.w.shape().to_vec();
        head.w = Tensor::from_fn(shape, |_| rng.gen_range(-0.5..0.5));
        let shape = head.b.shape().to_vec();
        head.b = Tensor::from_fn(shape, |_| rng.gen_range(-0.5..0.5));
    }
    Setup { dataset, params, batch, arch }
}

/// Worst relative error per root: the eleven terms in `entries` order,
/// scale-shift depth, then the weighted total.
fn root_errors(s: &Setup) -> Vec<(String, f64)> {
    let blocks: Vec<Tensor<f64>> = s.params.named().into_iter().map(|(_, t)| t.clone()).collect();
    let errors = finite_difference_check_many(
        |tape, vars: &[Var<'_, f64>]| {
            let mut it = vars.iter();
            let fields = s.params.try_map(|_| Ok::<_, dnerf_core::Error>(*it.next().expect("one var per block")))?;
            let terms = loss_terms(tape, &fields, &s.arch, &s.dataset, &s.batch, DepthMode::Order)?;
            let shifted = loss_terms(tape, &fields, &s.arch, &s.dataset, &s.batch, DepthMode::ScaleShift)?.depth;
            let (total, _) = total_loss(tape, &terms, &LossWeights::default())?;
            let mut roots: Vec<Var<'_, f64>> = terms.entries().iter().map(|(_, v)| **v).collect();
            roots.extend([shifted, total]);
            Ok::<_, dnerf_core::Error>(roots)
        },
        &blocks,
        H,
    )
    .unwrap();
    let mut names: Vec<String> = LossWeights::default().entries().iter().map(|(n, _)| n.to_string()).collect();
    names.extend(["depth (scale-shift)".to_string(), "total".to_string()]);
    names.into_iter().zip(errors).collect()
}

/// Each term is nonzero on this batch, so a passing check is not vacuous.
#[test]
fn every_term_is_active_on_the_batch() {
    let s = setup();
    let tape = dnerf_autodiff::Tape::<f64>::new();
    let fields = s.params.bind(&tape, false).unwrap();
    let cfg = ObjectiveConfig { weights: LossWeights::default(), depth_mode: DepthMode::Order };
    let (_, report) = objective(&tape, &fields, &s.arch, &s.dataset, &s.batch, &cfg).unwrap();
    let terms: LossTerms<f64> = report.terms;
    for (name, v) in terms.entries() {
        assert!(*v > 0.0 && v.is_finite(), "{name} = {v}");
    }
}

#[test]
fn every_term_and_the_total_match_central_differences() {
    let errors = root_errors(&setup());
    assert_eq!(errors.len(), 13);
    for (name, err) in errors {
        assert!(err < TOLERANCE, "{name}: relative error {err:e}");
    }
}

#[test]
fn objective_is_the_weighted_sum_of_the_terms() {
    let s = setup();
    let tape = dnerf_autodiff::Tape::<f64>::new();
    let fields = s.params.bind(&tape, false).unwrap();
    let weights = LossWeights::default();
    let cfg = ObjectiveConfig { weights, depth_mode: DepthMode::Order };
    let (total, report) = objective(&tape, &fields, &s.arch, &s.dataset, &s.batch, &cfg).unwrap();
    let terms = loss_terms(&tape, &fields, &s.arch, &s.dataset, &s.batch, DepthMode::Order).unwrap();
    let by_hand: f64 = terms.entries().iter().zip(weights.entries()).map(|((_, v), (_, w))| v.item() * w).sum();
    assert!((total.item() - by_hand).abs() < 1e-12);
    assert_eq!(report.terms, terms.map(|v| v.item()));
}
