//! Field outputs against a straight-line re-evaluation with plain loops.

use std::f64::consts::PI;

use dnerf_autodiff::{Tape, Tensor};
use dnerf_core::fields::{eval_dynamic, eval_static, init_params, ArchConfig, Dense, FieldParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sinusoids(x: &[f64], levels: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for l in 0..levels {
        let f = 2f64.powi(l as i32) * PI;
        out.extend(x.iter().map(|v| (f * v).sin()));
        out.extend(x.iter().map(|v| (f * v).cos()));
    }
    out
}

fn apply(layer: &Dense<Tensor<f64>>, x: &[f64]) -> Vec<f64> {
    let (fan_in, fan_out) = (layer.w.shape()[0], layer.w.shape()[1]);
    assert_eq!(fan_in, x.len());
    (0..fan_out)
        .map(|j| layer.b.data()[j] + (0..fan_in).map(|i| x[i] * layer.w.data()[i * fan_out + j]).sum::<f64>())
        .collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn mlp(layers: &[Dense<Tensor<f64>>], input: &[f64], skip: Option<usize>) -> Vec<f64> {
    let mut h = input.to_vec();
    for (i, l) in layers.iter().enumerate() {
        if i > 0 && Some(i) == skip {
            h = [input, &h].concat();
        }
        h = relu(apply(l, &h));
    }
    h
}

fn static_direct(p: &FieldParams<f64>, arch: &ArchConfig, x: [f64; 3], d: [f64; 3]) -> (f64, Vec<f64>) {
    let f = &p.static_field;
    let h = mlp(&f.trunk, &sinusoids(&x, arch.encoding.l_pos), arch.skip);
    let sigma = softplus(apply(&f.sigma, &h)[0]);
    let feature = apply(&f.feature, &h);
    let hidden = relu(apply(&f.color_hidden, &[feature, sinusoids(&d, arch.encoding.l_dir)].concat()));
    (sigma, apply(&f.color, &hidden).into_iter().map(sigmoid).collect())
}

/// `(σ, color, forward flow, backward flow, b)`.
type DynamicRow = (f64, Vec<f64>, Vec<f64>, Vec<f64>, f64);

fn dynamic_direct(p: &FieldParams<f64>, arch: &ArchConfig, x: [f64; 3], t: f64) -> DynamicRow {
    let f = &p.dynamic_field;
    let input = [sinusoids(&x, arch.encoding.l_pos), sinusoids(&[t], arch.encoding.l_time)].concat();
    let h = mlp(&f.trunk, &input, arch.skip);
    let b = sigmoid(apply(&f.blend, &h)[0]);
    let flow: Vec<f64> = apply(&f.flow, &h).into_iter().map(|v| v.tanh() * arch.flow_scale * (1.0 - b)).collect();
    (
        softplus(apply(&f.sigma, &h)[0]),
        apply(&f.color, &h).into_iter().map(sigmoid).collect(),
        flow[..3].to_vec(),
        flow[3..].to_vec(),
        b,
    )
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-6 * b.abs().max(1.0)
}

fn check(arch: ArchConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params::<f64>(seed, &arch).unwrap();
    let d = &mut params.dynamic_field;
    for head in [&mut d.flow, &mut d.blend] {
        let shape = head.w.shape().to_vec();
        head.w = Tensor::from_fn(shape, |_| rng.gen_range(-0.3..0.3));
    }
    let n = 5;
    let xs: Vec<[f64; 3]> = (0..n).map(|_| [0; 3].map(|_| rng.gen_range(-1.0..1.0))).collect();
    let ds: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            let v = [0; 3].map(|_| rng.gen_range(-1.0..1.0f64));
            let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
            v.map(|c| c / norm)
        })
        .collect();
    let ts: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();

    let tape = Tape::<f64>::new();
    let fields = params.bind(&tape, false).unwrap();
    let flat = |v: &[[f64; 3]]| tape.constant(Tensor::from_fn([n, 3], |i| v[i / 3][i % 3])).unwrap();
    let (sigma, color) = eval_static(&fields.static_field, &arch, flat(&xs), flat(&ds)).unwrap();
    let t = tape.constant(Tensor::from_fn([n, 1], |i| ts[i])).unwrap();
    let out = eval_dynamic(&fields.dynamic_field, &arch, flat(&xs), t).unwrap();
    for i in 0..n {
        let (s, c) = static_direct(&params, &arch, xs[i], ds[i]);
        assert!(close(sigma.value().data()[i], s));
        for k in 0..3 {
            assert!(close(color.value().data()[3 * i + k], c[k]));
        }
        let (s, c, fw, bw, b) = dynamic_direct(&params, &arch, xs[i], ts[i]);
        assert!(close(out.sigma.value().data()[i], s));
        assert!(close(out.blend.value().data()[i], b));
        for k in 0..3 {
            assert!(close(out.color.value().data()[3 * i + k], c[k]));
            assert!(close(out.flow_fw.value().data()[3 * i + k], fw[k]));
            assert!(close(out.flow_bw.value().data()[3 * i + k], bw[k]));
        }
    }
}

#[test]
fn full_size_fields_match_direct_evaluation() {
    check(ArchConfig::default(), 1);
}

#[test]
fn desk_and_tiny_fields_match_direct_evaluation() {
    check(ArchConfig::desk(), 2);
    check(ArchConfig::tiny(), 3);
}
