use crate::error::AutodiffError;
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Var;

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`.
///
/// `f` receives a fresh tape and one var per entry of `params` and returns
/// the scalar root. The result is the maximum over all parameter entries of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_difference_check<T, E, F>(f: F, params: &[Tensor<T>], h: f64) -> Result<f64, E>
where
    T: Real,
    E: From<AutodiffError>,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>, E>,
{
    fn single<'t, T: Real, E>(root: Result<Var<'t, T>, E>) -> Result<Vec<Var<'t, T>>, E> {
        root.map(|r| vec![r])
    }
    let worst = finite_difference_check_many(|tape, vars| single(f(tape, vars)), params, h)?;
    Ok(worst[0])
}

/// [`finite_difference_check`] for several scalar roots of one function.
///
/// Each perturbed evaluation serves every root at once; the result holds
/// the worst relative error per root, in order.
pub fn finite_difference_check_many<T, E, F>(f: F, params: &[Tensor<T>], h: f64) -> Result<Vec<f64>, E>
where
    T: Real,
    E: From<AutodiffError>,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Vec<Var<'t, T>>, E>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let eval = |ps: &[Tensor<T>]| -> Result<Vec<f64>, E> {
        let tape = Tape::new();
        let vars = ps.iter().map(|p| tape.constant(p.clone())).collect::<Result<Vec<_>, _>>()?;
        Ok(f(&tape, &vars)?.iter().map(|r| r.item().as_f64()).collect())
    };
    let roots = eval(params)?.len();
    // analytic[root][param]
    let mut analytic: Vec<Vec<Tensor<T>>> = Vec::with_capacity(roots);
    for root in 0..roots {
        let tape = Tape::new();
        let vars = params.iter().map(|p| tape.leaf(p.clone())).collect::<Result<Vec<_>, _>>()?;
        let outs = f(&tape, &vars)?;
        tape.backward(outs[root])?;
        analytic.push(
            vars.iter()
                .zip(params)
                .map(|(v, p)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
                .collect(),
        );
    }

    let mut worst = vec![0.0f64; roots];
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for pi in 0..params.len() {
        for ei in 0..params[pi].numel() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = T::of(orig.as_f64() + h);
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = T::of(orig.as_f64() - h);
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            for root in 0..roots {
                let numeric = (plus[root] - minus[root]) / (2.0 * h);
                let err = (analytic[root][pi].data()[ei].as_f64() - numeric).abs() / numeric.abs().max(1.0);
                worst[root] = worst[root].max(err);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_root_gets_its_own_error() {
        let params = [Tensor::<f64>::from_f64(vec![3], &[0.3, -1.2, 2.0]).unwrap()];
        let worst = finite_difference_check_many::<f64, AutodiffError, _>(
            |_, v| Ok(vec![v[0].square()?.sum()?, v[0].sin()?.sum()?]),
            &params,
            1e-6,
        )
        .unwrap();
        assert_eq!(worst.len(), 2);
        assert!(worst.iter().all(|&e| e < 1e-8), "{worst:?}");
    }

    #[test]
    fn a_wrong_gradient_is_reported_for_its_root_only() {
        let params = [Tensor::<f64>::from_f64(vec![2], &[0.5, 1.5]).unwrap()];
        // A constant copy hides the dependence from the tape.
        let worst = finite_difference_check_many::<f64, AutodiffError, _>(
            |tape, v| {
                let hidden = tape.constant((*v[0].value()).clone())?;
                Ok(vec![v[0].sum()?, hidden.square()?.sum()?])
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(worst[0] < 1e-8);
        // d/dx x² = 2x is missed entirely; largest numeric slope is 3.
        assert!((worst[1] - 1.0).abs() < 1e-6, "{worst:?}");
    }
}
