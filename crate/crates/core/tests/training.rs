//! Training loop behaviour: determinism, resumption and the optimizer.

use dnerf_autodiff::{Tape, Tensor};
use dnerf_core::data::checkpoint::Checkpoint;
use dnerf_core::data::synth::{synth_scene, SyntheticSpec};
use dnerf_core::data::SceneDataset;
use dnerf_core::fields::ArchConfig;
use dnerf_core::losses::DepthMode;
use dnerf_core::optimize::{train, AdamConfig, AdamState, TrainConfig, Trainer, CHECKPOINT_FILE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset() -> SceneDataset {
    let spec = SyntheticSpec { frames: 3, width: 16, height: 12, focal: 16.0, ..SyntheticSpec::default() };
    synth_scene(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().dataset
}

fn config(iterations: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        rays: 32,
        samples: 8,
        depth_pairs: 16,
        checkpoint_every: 0,
        arch: ArchConfig::tiny(),
        ..TrainConfig::default()
    }
}

fn run(ds: &SceneDataset, cfg: TrainConfig) -> (Checkpoint, Vec<String>) {
    let mut trainer = Trainer::new(ds, cfg).unwrap();
    let mut log = Vec::new();
    let ckpt = train(&mut trainer, None, |r| {
        log.push(r.to_line());
        Ok(())
    })
    .unwrap();
    (ckpt, log)
}

#[test]
fn identical_runs_give_identical_checkpoints_and_logs() {
    let ds = dataset();
    let (a, log_a) = run(&ds, config(4));
    let (b, log_b) = run(&ds, config(4));
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.len(), 4);
    let (c, _) = run(&ds, TrainConfig { seed: 1, ..config(4) });
    assert_ne!(a.to_bytes(), c.to_bytes());
}

#[test]
fn resuming_continues_exactly() {
    let ds = dataset();
    let (straight, log_straight) = run(&ds, config(5));
    let (half, log_half) = run(&ds, config(2));
    let saved = Checkpoint::from_bytes(&half.to_bytes(), Some(&ArchConfig::tiny())).unwrap();
    assert_eq!(saved.iteration, 2);
    let mut trainer = Trainer::resume(&ds, config(5), saved).unwrap();
    let mut log_rest = Vec::new();
    let resumed = train(&mut trainer, None, |r| {
        log_rest.push(r.to_line());
        Ok(())
    })
    .unwrap();
    assert_eq!(resumed.to_bytes(), straight.to_bytes());
    assert_eq!([log_half, log_rest].concat(), log_straight);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let ds = dataset();
    let cfg = TrainConfig { adam: AdamConfig { lr: 0.0, ..AdamConfig::default() }, ..config(3) };
    let initial = Trainer::new(&ds, cfg.clone()).unwrap().params;
    let (ckpt, _) = run(&ds, cfg);
    assert_eq!(ckpt.params, initial);
    assert_eq!(ckpt.adam.step, 3);
}

#[test]
fn loss_decreases_over_a_short_run() {
    let ds = dataset();
    let cfg = TrainConfig { rays: 128, adam: AdamConfig { lr: 5e-3, ..AdamConfig::default() }, ..config(60) };
    let (_, log) = run(&ds, cfg);
    let total = |line: &String| serde_json::from_str::<serde_json::Value>(line).unwrap()["total"].as_f64().unwrap();
    let first: f64 = log[..10].iter().map(total).sum::<f64>() / 10.0;
    let last: f64 = log[50..].iter().map(total).sum::<f64>() / 10.0;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn scale_shift_mode_trains() {
    let ds = dataset();
    let (ckpt, log) = run(&ds, TrainConfig { depth_mode: DepthMode::ScaleShift, ..config(2) });
    assert_eq!(ckpt.iteration, 2);
    assert!(log.iter().all(|l| !l.contains("NaN")));
}

#[test]
fn checkpoints_land_in_the_output_directory() {
    let ds = dataset();
    let tmp = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::new(&ds, TrainConfig { checkpoint_every: 2, ..config(3) }).unwrap();
    let done = train(&mut trainer, Some(tmp.path()), |_| Ok(())).unwrap();
    let loaded = Checkpoint::load(&tmp.path().join(CHECKPOINT_FILE), None).unwrap();
    assert_eq!(loaded, done);
    assert!(tmp.path().join("val_000002.png").is_file());
    assert!(tmp.path().join("val_000003.png").is_file());
}

#[test]
fn zero_iterations_saves_the_initialization() {
    let ds = dataset();
    let tmp = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::new(&ds, config(0)).unwrap();
    let initial = trainer.params.clone();
    train(&mut trainer, Some(tmp.path()), |_| panic!("no iterations expected")).unwrap();
    let loaded = Checkpoint::load(&tmp.path().join(CHECKPOINT_FILE), None).unwrap();
    assert_eq!(loaded.iteration, 0);
    assert_eq!(loaded.params, initial);
}

/// Adam on `(θ − 3)²` from `theta0`; returns θ after each step.
fn adam_on_quadratic(theta0: f64, steps: usize) -> Vec<f64> {
    let mut theta = Tensor::<f64>::full([1], theta0);
    let mut adam = AdamState::new(AdamConfig::default(), &[vec![1]]);
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(theta.clone()).unwrap();
        let loss = x.add_scalar(-3.0).unwrap().square().unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        adam.update(&mut [("theta".to_string(), &mut theta)], &[g]).unwrap();
        trace.push(theta.data()[0]);
    }
    trace
}

#[test]
fn adam_reaches_the_minimum_from_within_its_travel() {
    let trace = adam_on_quadratic(2.8, 2000);
    assert!((trace[1999] - 3.0).abs() < 1e-3, "{}", trace[1999]);
}

/// Each step moves at most about the learning rate, so from θ = 0 two
/// thousand steps cover roughly one unit.
#[test]
fn adam_travel_is_bounded_by_the_learning_rate() {
    let trace = adam_on_quadratic(0.0, 2000);
    let mut prev = 0.0;
    for &t in &trace {
        assert!((t - prev).abs() <= 5e-4 * (1.0 + 1e-6));
        prev = t;
    }
    assert!(trace[1999] > 0.9 && trace[1999] < 1.0, "{}", trace[1999]);
}
