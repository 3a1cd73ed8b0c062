//! Stratified sampling and volume-rendering quadrature.
//!
//! A batch of `R` rays with `K` samples each is laid out ray-major: sample
//! `k` of ray `r` is row `r * K + k` of every per-sample var.

use dnerf_autodiff::{Real, Tape, Tensor, Var, GUARD_EPS};
use rand::Rng;

use crate::camera::Ray;
use crate::error::{Error, Result};
use crate::fields::{eval_dynamic, eval_static, ArchConfig, BoundFields, DynamicField, DynamicOutput, StaticField};

/// Gap assigned to the last sample of a ray (opaque beyond the far bound).
pub const FAR_SENTINEL: f64 = 1e10;

/// Quadrature points for a batch of rays.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub rays: usize,
    pub k: usize,
    /// `[rays * k]` increasing per ray.
    pub depths: Vec<f64>,
    /// `[rays * k]` gaps to the next sample.
    pub deltas: Vec<f64>,
    /// Far bound of each ray; the depth reported for empty rays.
    pub far: Vec<f64>,
}

impl SampleSet {
    /// Explicit samples; every gap must be positive.
    pub fn new(k: usize, depths: Vec<f64>, deltas: Vec<f64>, far: Vec<f64>) -> Result<Self> {
        let rays = far.len();
        for (what, v) in [("sample depths", &depths), ("sample gaps", &deltas)] {
            if v.len() != rays * k {
                return Err(Error::LengthMismatch { what, expected: rays * k, actual: v.len() });
            }
        }
        if deltas.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::Config("sample gaps must be positive".into()));
        }
        Ok(Self { rays, k, depths, deltas, far })
    }

    /// One sample per stratum of `[near, far]`: the midpoint, or a uniform
    /// draw when `rng` is given. The last gap is [`FAR_SENTINEL`].
    pub fn stratified<R: Rng>(bounds: &[(f64, f64)], k: usize, mut rng: Option<&mut R>) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("need at least 2 samples per ray, got {k}")));
        }
        let mut depths = Vec::with_capacity(bounds.len() * k);
        let mut deltas = Vec::with_capacity(bounds.len() * k);
        for &(near, far) in bounds {
            let width = (far - near) / k as f64;
            let start = depths.len();
            for m in 0..k {
                let u = match rng.as_deref_mut() {
                    Some(r) => r.gen::<f64>(),
                    None => 0.5,
                };
                depths.push(near + (m as f64 + u) * width);
            }
            for m in 0..k {
                deltas.push(if m + 1 < k { depths[start + m + 1] - depths[start + m] } else { FAR_SENTINEL });
            }
        }
        let far = bounds.iter().map(|b| b.1).collect();
        Self::new(k, depths, deltas, far)
    }

    /// Midpoints of `k` equal cells partitioning `[near, far]`, each with
    /// the cell width as its gap, so the quadrature covers exactly the
    /// interval.
    pub fn partition(bounds: &[(f64, f64)], k: usize) -> Result<Self> {
        let mut depths = Vec::with_capacity(bounds.len() * k);
        let mut deltas = Vec::with_capacity(bounds.len() * k);
        for &(near, far) in bounds {
            let width = (far - near) / k as f64;
            for m in 0..k {
                depths.push(near + (m as f64 + 0.5) * width);
                deltas.push(width);
            }
        }
        let far = bounds.iter().map(|b| b.1).collect();
        Self::new(k, depths, deltas, far)
    }

    pub fn len(&self) -> usize {
        self.rays * self.k
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The samples of the given rays, in the given order.
    pub fn subset(&self, rays: &[usize]) -> Self {
        let pick = |v: &[f64]| rays.iter().flat_map(|&r| v[r * self.k..(r + 1) * self.k].iter().copied()).collect();
        Self {
            rays: rays.len(),
            k: self.k,
            depths: pick(&self.depths),
            deltas: pick(&self.deltas),
            far: rays.iter().map(|&r| self.far[r]).collect(),
        }
    }

    /// Row indices of every sample of the given rays.
    pub fn sample_rows(&self, rays: &[usize]) -> Vec<usize> {
        rays.iter().flat_map(|&r| r * self.k..(r + 1) * self.k).collect()
    }

    /// World positions `o + s d`, `[rays * k, 3]`.
    pub fn positions<T: Real>(&self, rays: &[Ray]) -> Result<Tensor<T>> {
        self.check_rays(rays)?;
        let mut out = Vec::with_capacity(self.len() * 3);
        for (r, ray) in rays.iter().enumerate() {
            for &s in &self.depths[r * self.k..(r + 1) * self.k] {
                let x = ray.origin + ray.dir * s;
                out.extend([T::of(x.x), T::of(x.y), T::of(x.z)]);
            }
        }
        Ok(Tensor::new([self.len(), 3], out)?)
    }

    /// Ray directions repeated per sample, `[rays * k, 3]`.
    pub fn directions<T: Real>(&self, rays: &[Ray]) -> Result<Tensor<T>> {
        self.check_rays(rays)?;
        let mut out = Vec::with_capacity(self.len() * 3);
        for ray in rays {
            for _ in 0..self.k {
                out.extend([T::of(ray.dir.x), T::of(ray.dir.y), T::of(ray.dir.z)]);
            }
        }
        Ok(Tensor::new([self.len(), 3], out)?)
    }

    /// One value per ray repeated per sample, `[rays * k, 1]`.
    pub fn per_sample<T: Real>(&self, per_ray: &[f64]) -> Result<Tensor<T>> {
        if per_ray.len() != self.rays {
            return Err(Error::LengthMismatch { what: "per-ray values", expected: self.rays, actual: per_ray.len() });
        }
        Ok(Tensor::from_fn([self.len(), 1], |i| T::of(per_ray[i / self.k])))
    }

    fn check_rays(&self, rays: &[Ray]) -> Result<()> {
        if rays.len() != self.rays {
            return Err(Error::LengthMismatch { what: "rays", expected: self.rays, actual: rays.len() });
        }
        Ok(())
    }
}

/// Composited result for a batch of rays.
#[derive(Clone, Copy, Debug)]
pub struct RenderOutput<'t, T: Real> {
    /// `[R, 3]`
    pub color: Var<'t, T>,
    /// Expected termination depth, `[R, 1]`.
    pub depth: Var<'t, T>,
    /// `W_k = T_k α_k`, `[R, K]`.
    pub weights: Var<'t, T>,
    /// `Σ_k W_k`, `[R, 1]`.
    pub acc: Var<'t, T>,
}

fn check_per_sample<T: Real>(v: &Var<'_, T>, samples: &SampleSet, cols: usize, what: &'static str) -> Result<()> {
    let s = v.shape();
    if s != [samples.len(), cols] {
        return Err(Error::LengthMismatch { what, expected: samples.len() * cols, actual: v.numel() });
    }
    Ok(())
}

/// Strictly upper triangular ones: `(x U)_k = Σ_{k' < k} x_k'`.
fn exclusive_cumsum_matrix<T: Real>(tape: &Tape<T>, k: usize) -> Result<Var<'_, T>> {
    Ok(tape.constant(Tensor::from_fn([k, k], |i| if i / k < i % k { T::one() } else { T::zero() }))?)
}

fn grid<'t, T: Real>(tape: &'t Tape<T>, samples: &SampleSet, v: &[f64]) -> Result<Var<'t, T>> {
    Ok(tape.constant(Tensor::from_fn([samples.rays, samples.k], |i| T::of(v[i])))?)
}

/// `Σ_k w_k c_k` per ray for weights `[R, K]` and colors `[R*K, 3]`.
fn weighted_color<'t, T: Real>(weights: Var<'t, T>, color: Var<'t, T>, samples: &SampleSet) -> Result<Var<'t, T>> {
    let w = weights.reshape([samples.len(), 1])?.expand_last(3)?;
    Ok(w.mul(color)?.reshape([samples.rays, samples.k, 3])?.sum_axis(1)?)
}

/// Expected depth `(Σ W s + ε s_f) / (Σ W + ε)`, so empty rays report their
/// far bound.
pub fn render_depth<'t, T: Real>(tape: &'t Tape<T>, weights: Var<'t, T>, samples: &SampleSet) -> Result<Var<'t, T>> {
    let r = samples.rays;
    let s = grid(tape, samples, &samples.depths)?;
    let eps_far = tape.constant(Tensor::from_fn([r, 1], |i| T::of(GUARD_EPS * samples.far[i])))?;
    let num = weights.mul(s)?.sum_axis(1)?.reshape([r, 1])?.add(eps_far)?;
    let den = weights.sum_axis(1)?.reshape([r, 1])?.add_scalar(GUARD_EPS)?;
    Ok(num.div(den)?)
}

/// Emission–absorption quadrature of one medium.
pub fn composite<'t, T: Real>(
    tape: &'t Tape<T>,
    sigma: Var<'t, T>,
    color: Var<'t, T>,
    samples: &SampleSet,
) -> Result<RenderOutput<'t, T>> {
    check_per_sample(&sigma, samples, 1, "densities")?;
    check_per_sample(&color, samples, 3, "colors")?;
    let (r, k) = (samples.rays, samples.k);
    let delta = grid(tape, samples, &samples.deltas)?;
    let tau = sigma.reshape([r, k])?.mul(delta)?;
    let trans = tau.matmul(exclusive_cumsum_matrix(tape, k)?)?.neg()?.exp()?;
    let alpha = tau.neg()?.exp()?.one_minus()?;
    let weights = trans.mul(alpha)?;
    finish(tape, weights, weighted_color(weights, color, samples)?, samples)
}

fn finish<'t, T: Real>(
    tape: &'t Tape<T>,
    weights: Var<'t, T>,
    color: Var<'t, T>,
    samples: &SampleSet,
) -> Result<RenderOutput<'t, T>> {
    Ok(RenderOutput {
        color,
        depth: render_depth(tape, weights, samples)?,
        weights,
        acc: weights.sum_axis(1)?.reshape([samples.rays, 1])?,
    })
}

/// Two media blended per sample by `b`: extinction `(1−b)σ^d + bσ^s`,
/// source `α^d(1−b)c^d + α^s b c^s`.
#[allow(clippy::too_many_arguments)]
pub fn composite_blend<'t, T: Real>(
    tape: &'t Tape<T>,
    sigma_s: Var<'t, T>,
    color_s: Var<'t, T>,
    sigma_d: Var<'t, T>,
    color_d: Var<'t, T>,
    blend: Var<'t, T>,
    samples: &SampleSet,
) -> Result<RenderOutput<'t, T>> {
    check_per_sample(&sigma_s, samples, 1, "static densities")?;
    check_per_sample(&sigma_d, samples, 1, "dynamic densities")?;
    check_per_sample(&color_s, samples, 3, "static colors")?;
    check_per_sample(&color_d, samples, 3, "dynamic colors")?;
    check_per_sample(&blend, samples, 1, "blending weights")?;
    let (r, k) = (samples.rays, samples.k);
    let delta = grid(tape, samples, &samples.deltas)?;
    let b = blend.reshape([r, k])?;
    let keep = b.one_minus()?;
    let tau_s = sigma_s.reshape([r, k])?.mul(delta)?;
    let tau_d = sigma_d.reshape([r, k])?.mul(delta)?;
    let extinction = keep.mul(tau_d)?.add(b.mul(tau_s)?)?;
    let trans = extinction.matmul(exclusive_cumsum_matrix(tape, k)?)?.neg()?.exp()?;
    let w_d = trans.mul(tau_d.neg()?.exp()?.one_minus()?.mul(keep)?)?;
    let w_s = trans.mul(tau_s.neg()?.exp()?.one_minus()?.mul(b)?)?;
    let color = weighted_color(w_d, color_d, samples)?.add(weighted_color(w_s, color_s, samples)?)?;
    finish(tape, w_d.add(w_s)?, color, samples)
}

/// Everything one blended render produces.
#[derive(Clone, Copy, Debug)]
pub struct FullRender<'t, T: Real> {
    pub full: RenderOutput<'t, T>,
    pub static_pass: RenderOutput<'t, T>,
    pub dynamic_pass: RenderOutput<'t, T>,
    /// Blended render with the static medium removed.
    pub dynamic_only: RenderOutput<'t, T>,
    pub dynamic: DynamicOutput<'t, T>,
}

pub fn render_static<'t, T: Real>(
    tape: &'t Tape<T>,
    field: &StaticField<Var<'t, T>>,
    arch: &ArchConfig,
    rays: &[Ray],
    samples: &SampleSet,
) -> Result<RenderOutput<'t, T>> {
    let x = tape.constant(samples.positions(rays)?)?;
    let d = tape.constant(samples.directions(rays)?)?;
    let (sigma, color) = eval_static(field, arch, x, d)?;
    composite(tape, sigma, color, samples)
}

/// Dynamic field rendered at one time per ray. With `flow`, sample
/// positions are displaced by it before the field is queried; the gaps stay
/// those of the original ray.
#[allow(clippy::too_many_arguments)]
pub fn render_dynamic<'t, T: Real>(
    tape: &'t Tape<T>,
    field: &DynamicField<Var<'t, T>>,
    arch: &ArchConfig,
    rays: &[Ray],
    samples: &SampleSet,
    times: &[f64],
    flow: Option<Var<'t, T>>,
) -> Result<(RenderOutput<'t, T>, DynamicOutput<'t, T>)> {
    let mut x = tape.constant(samples.positions(rays)?)?;
    if let Some(f) = flow {
        x = crate::sceneflow::warp_points(x, f)?;
    }
    let t = tape.constant(samples.per_sample(times)?)?;
    let out = eval_dynamic(field, arch, x, t)?;
    Ok((composite(tape, out.sigma, out.color, samples)?, out))
}

pub fn render_full<'t, T: Real>(
    tape: &'t Tape<T>,
    fields: &BoundFields<'t, T>,
    arch: &ArchConfig,
    rays: &[Ray],
    samples: &SampleSet,
    times: &[f64],
) -> Result<FullRender<'t, T>> {
    let x = tape.constant(samples.positions(rays)?)?;
    let d = tape.constant(samples.directions(rays)?)?;
    let t = tape.constant(samples.per_sample(times)?)?;
    let (sigma_s, color_s) = eval_static(&fields.static_field, arch, x, d)?;
    let dynamic = eval_dynamic(&fields.dynamic_field, arch, x, t)?;
    let full = composite_blend(tape, sigma_s, color_s, dynamic.sigma, dynamic.color, dynamic.blend, samples)?;
    let empty = tape.constant(Tensor::zeros([samples.len(), 1]))?;
    let dynamic_only = composite_blend(tape, empty, color_s, dynamic.sigma, dynamic.color, dynamic.blend, samples)?;
    Ok(FullRender {
        full,
        static_pass: composite(tape, sigma_s, color_s, samples)?,
        dynamic_pass: composite(tape, dynamic.sigma, dynamic.color, samples)?,
        dynamic_only,
        dynamic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_medium<'t>(tape: &'t Tape<f64>, samples: &SampleSet, sigma: &[f64], color: [f64; 3]) -> RenderOutput<'t, f64> {
        let s = tape.constant(Tensor::new([samples.len(), 1], sigma.to_vec()).unwrap()).unwrap();
        let c = tape.constant(Tensor::from_fn([samples.len(), 3], |i| color[i % 3])).unwrap();
        composite(tape, s, c, samples).unwrap()
    }

    #[test]
    fn midpoints_without_jitter() {
        let s = SampleSet::stratified::<ChaCha8Rng>(&[(0.0, 1.0)], 4, None).unwrap();
        assert_eq!(s.depths, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(s.deltas, vec![0.25, 0.25, 0.25, FAR_SENTINEL]);
    }

    #[test]
    fn jittered_samples_stay_in_their_strata() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let s = SampleSet::stratified(&[(2.0, 6.0)], 8, Some(&mut rng)).unwrap();
            for (m, &d) in s.depths.iter().enumerate() {
                assert!(d >= 2.0 + m as f64 * 0.5 && d < 2.0 + (m + 1) as f64 * 0.5);
            }
            assert!(s.depths.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn jitter_mean_is_the_stratum_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let (k, width) = (4, 0.25);
        let mut sums = vec![0.0; k];
        for _ in 0..n {
            let s = SampleSet::stratified(&[(0.0, 1.0)], k, Some(&mut rng)).unwrap();
            for (acc, d) in sums.iter_mut().zip(&s.depths) {
                *acc += d;
            }
        }
        // Uniform on a cell of width w has standard deviation w/√12.
        let sigma_mean = width / 12f64.sqrt() / (n as f64).sqrt();
        for (m, total) in sums.iter().enumerate() {
            let center = (m as f64 + 0.5) * width;
            assert!((total / n as f64 - center).abs() < 3.0 * sigma_mean);
        }
    }

    #[test]
    fn empty_medium_is_black_and_transparent() {
        let tape = Tape::<f64>::new();
        let samples = SampleSet::stratified::<ChaCha8Rng>(&[(0.0, 1.0)], 8, None).unwrap();
        let out = constant_medium(&tape, &samples, &[0.0; 8], [0.3, 0.6, 0.9]);
        assert!(out.color.value().data().iter().all(|&c| c == 0.0));
        assert_eq!(out.acc.item(), 0.0);
        assert_eq!(out.depth.item(), 1.0);
    }

    #[test]
    fn opaque_front_sample_dominates() {
        let tape = Tape::<f64>::new();
        let samples = SampleSet::stratified::<ChaCha8Rng>(&[(0.0, 1.0)], 4, None).unwrap();
        let s = tape.constant(Tensor::from_f64([4, 1], &[1e6, 0.0, 3.0, 1.0]).unwrap()).unwrap();
        let c = tape
            .constant(Tensor::from_f64([4, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap())
            .unwrap();
        let out = composite(&tape, s, c, &samples).unwrap();
        assert_eq!(out.color.value().data(), &[1.0, 0.0, 0.0]);
        assert_eq!(out.acc.item(), 1.0);
        assert!((out.depth.item() - 0.125).abs() < 1e-9);
    }

    #[test]
    fn constant_medium_matches_closed_form() {
        let tape = Tape::<f64>::new();
        let samples = SampleSet::partition(&[(0.0, 1.0)], 64).unwrap();
        let c = [0.3, 0.6, 0.9];
        let out = constant_medium(&tape, &samples, &[2.0; 64], c);
        let opacity = 1.0 - (-2.0f64).exp();
        for (got, want) in out.color.value().data().iter().zip(c) {
            assert!((got - opacity * want).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_is_the_weighted_mean() {
        let tape = Tape::<f64>::new();
        let samples = SampleSet::new(2, vec![0.2, 0.6], vec![0.4, 0.4], vec![1.0]).unwrap();
        let w = tape.constant(Tensor::from_f64([1, 2], &[0.5, 0.5]).unwrap()).unwrap();
        assert!((render_depth(&tape, w, &samples).unwrap().item() - 0.4).abs() < 1e-9);
    }

    #[test]
    fn blend_extremes_reduce_to_single_media() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples = SampleSet::stratified(&[(0.5, 2.0), (1.0, 3.0), (0.2, 0.9)], 16, Some(&mut rng)).unwrap();
        let n = samples.len();
        let tape = Tape::<f64>::new();
        let rand = |cols: usize, scale: f64, rng: &mut ChaCha8Rng| {
            tape.constant(Tensor::from_fn([n, cols], |_| rng.gen_range(0.0..scale))).unwrap()
        };
        let (ss, cs, sd, cd) = (rand(1, 4.0, &mut rng), rand(3, 1.0, &mut rng), rand(1, 4.0, &mut rng), rand(3, 1.0, &mut rng));
        let ones = tape.constant(Tensor::full([n, 1], 1.0)).unwrap();
        let zeros = tape.constant(Tensor::zeros([n, 1])).unwrap();
        let stat = composite(&tape, ss, cs, &samples).unwrap();
        let dynm = composite(&tape, sd, cd, &samples).unwrap();
        let as_static = composite_blend(&tape, ss, cs, sd, cd, ones, &samples).unwrap();
        let as_dynamic = composite_blend(&tape, ss, cs, sd, cd, zeros, &samples).unwrap();
        for (a, b) in [(as_static, stat), (as_dynamic, dynm)] {
            for (x, y) in a.color.value().data().iter().zip(b.color.value().data()) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in a.weights.value().data().iter().zip(b.weights.value().data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
