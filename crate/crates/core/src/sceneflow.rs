//! Point warping, differentiable projection, and scene-flow induced optical
//! flow.

use dnerf_autodiff::{Real, Tape, Tensor, Var};

use crate::camera::{Camera, MIN_DEPTH};
use crate::error::{Error, Result};
use crate::render::SampleSet;

/// `x + s`.
pub fn warp_points<'t, T: Real>(x: Var<'t, T>, s: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(x.add(s)?)
}

/// Pixel coordinates of a batch of points, each projected into its own
/// camera.
#[derive(Clone, Debug)]
pub struct Projection<'t, T: Real> {
    /// `[n, 1]`
    pub u: Var<'t, T>,
    /// `[n, 1]`
    pub v: Var<'t, T>,
    /// False where the point is behind its camera; `u`, `v` are then
    /// meaningless (but finite).
    pub valid: Vec<bool>,
}

/// Projects row `i` of `x: [n, 3]` into `cams[i]`.
pub fn project_points<'t, T: Real>(tape: &'t Tape<T>, x: Var<'t, T>, cams: &[&Camera]) -> Result<Projection<'t, T>> {
    let n = cams.len();
    if x.shape() != [n, 3] {
        return Err(Error::LengthMismatch { what: "projected points", expected: n * 3, actual: x.numel() });
    }
    let per_row = |f: &dyn Fn(&Camera) -> [f64; 3]| -> Result<Var<'t, T>> {
        let mut data = Vec::with_capacity(n * 3);
        for c in cams {
            data.extend(f(c).map(T::of));
        }
        Ok(tape.constant(Tensor::new([n, 3], data)?)?)
    };
    let scalar = |f: &dyn Fn(&Camera) -> f64| -> Result<Var<'t, T>> {
        Ok(tape.constant(Tensor::from_fn([n, 1], |i| T::of(f(cams[i]))))?)
    };
    let diff = x.sub(per_row(&|c| [c.center.x, c.center.y, c.center.z])?)?;
    // Row j of Rᵀ is column j of R.
    let axis = |j: usize| -> Result<Var<'t, T>> {
        let col = per_row(&|c| [c.rotation[(0, j)], c.rotation[(1, j)], c.rotation[(2, j)]])?;
        Ok(diff.mul(col)?.sum_axis(1)?.reshape([n, 1])?)
    };
    let (xc, yc, zc) = (axis(0)?, axis(1)?, axis(2)?);
    let depth = zc.neg()?;
    let valid: Vec<bool> = depth.value().data().iter().map(|d| d.as_f64() > MIN_DEPTH).collect();
    let keep = tape.constant(Tensor::from_fn([n, 1], |i| if valid[i] { T::one() } else { T::zero() }))?;
    let fill = tape.constant(Tensor::from_fn([n, 1], |i| if valid[i] { T::zero() } else { T::one() }))?;
    let safe_depth = depth.mul(keep)?.add(fill)?;
    let u = scalar(&|c| c.fx)?.mul(xc.div(safe_depth)?)?.add(scalar(&|c| c.cx)?)?;
    let v = scalar(&|c| c.cy)?.sub(scalar(&|c| c.fy)?.mul(yc.div(safe_depth)?)?)?;
    Ok(Projection { u, v, valid })
}

/// Expected flow per ray in pixels, `[R, 2]`, with the rays for which the
/// estimate is usable.
#[derive(Clone, Debug)]
pub struct InducedFlow<'t, T: Real> {
    pub flow: Var<'t, T>,
    /// False when more than half of the ray's weight warped behind the
    /// reference camera.
    pub usable: Vec<bool>,
}

/// `Σ_k W_k P(x_k + s_k) / Σ_k W_k − p`, summing only samples in front of
/// the reference camera.
///
/// `weights` is `[R, K]`, `warped` the displaced sample positions
/// `[R*K, 3]`, `cams[r]` the reference camera of ray `r`, and `source[r]`
/// the `(u, v)` of the ray's own pixel.
pub fn induced_flow<'t, T: Real>(
    tape: &'t Tape<T>,
    weights: Var<'t, T>,
    warped: Var<'t, T>,
    cams: &[&Camera],
    source: &[[f64; 2]],
    samples: &SampleSet,
) -> Result<InducedFlow<'t, T>> {
    let (r, k) = (samples.rays, samples.k);
    if cams.len() != r || source.len() != r {
        return Err(Error::LengthMismatch { what: "reference cameras", expected: r, actual: cams.len().min(source.len()) });
    }
    if weights.shape() != [r, k] {
        return Err(Error::LengthMismatch { what: "rendering weights", expected: r * k, actual: weights.numel() });
    }
    let per_sample: Vec<&Camera> = cams.iter().flat_map(|c| std::iter::repeat(*c).take(k)).collect();
    let proj = project_points(tape, warped, &per_sample)?;
    let keep = tape.constant(Tensor::from_fn([r, k], |i| if proj.valid[i] { T::one() } else { T::zero() }))?;
    let w = weights.mul(keep)?;
    let den = w.sum_axis(1)?.reshape([r, 1])?.add_scalar(dnerf_autodiff::GUARD_EPS)?;
    let expect = |coord: Var<'t, T>| -> Result<Var<'t, T>> {
        Ok(w.mul(coord.reshape([r, k])?)?.sum_axis(1)?.reshape([r, 1])?.div(den)?)
    };
    let p0 = |c: usize| tape.constant(Tensor::from_fn([r, 1], |i| T::of(source[i][c])));
    let du = expect(proj.u)?.sub(p0(0)?)?;
    let dv = expect(proj.v)?.sub(p0(1)?)?;

    let wv = weights.value();
    let usable = (0..r)
        .map(|ray| {
            let row = &wv.data()[ray * k..(ray + 1) * k];
            let total: f64 = row.iter().map(|w| w.as_f64()).sum();
            let dropped: f64 = row.iter().zip(&proj.valid[ray * k..]).filter(|(_, ok)| !**ok).map(|(w, _)| w.as_f64()).sum();
            dropped <= 0.5 * total
        })
        .collect();
    Ok(InducedFlow { flow: Var::concat(&[du, dv], 1)?, usable })
}
