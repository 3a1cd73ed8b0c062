//! Adam with bias correction.

use dnerf_autodiff::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.lr.is_finite();
        if !ok {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// Moments for a list of parameter blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, shapes: &[Vec<usize>]) -> Self {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// One update of every block with the configured learning rate.
    pub fn update(&mut self, params: &mut [(String, &mut Tensor<T>)], grads: &[Tensor<T>]) -> Result<()> {
        self.update_with_lr(params, grads, self.config.lr)
    }

    /// One update with an explicit learning rate. Nothing is modified if
    /// any gradient is non-finite.
    pub fn update_with_lr(&mut self, params: &mut [(String, &mut Tensor<T>)], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::LengthMismatch { what: "parameter blocks", expected: self.m.len(), actual: grads.len() });
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Config(format!("gradient of {name} has shape {:?}, expected {:?}", g.shape(), p.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((_, p), g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let values = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..values.len() {
                let gi = g.data()[i].as_f64();
                let mi = beta1 * md[i].as_f64() + (1.0 - beta1) * gi;
                let vi = beta2 * vd[i].as_f64() + (1.0 - beta2) * gi * gi;
                md[i] = T::of(mi);
                vd[i] = T::of(vi);
                let step = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                values[i] = T::of(values[i].as_f64() - step);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state() -> (AdamState<f64>, Tensor<f64>) {
        (AdamState::new(AdamConfig::default(), &[vec![1]]), Tensor::from_f64([1], &[0.0]).unwrap())
    }

    fn step(state: &mut AdamState<f64>, theta: &mut Tensor<f64>, g: f64) {
        let grad = Tensor::from_f64([1], &[g]).unwrap();
        state.update(&mut [("theta".into(), theta)], &[grad]).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let (mut s, mut theta) = scalar_state();
        theta.data_mut()[0] = 1.5;
        s.m[0].data_mut()[0] = 0.2;
        s.v[0].data_mut()[0] = 0.04;
        s.step = 3;
        let before = theta.clone();
        // A zero gradient still moves θ by the remaining momentum, so the
        // parameter-unchanged case starts from zero moments.
        let (mut fresh, mut t2) = scalar_state();
        step(&mut fresh, &mut t2, 0.0);
        assert_eq!(t2.data()[0], 0.0);
        assert_eq!(fresh.m[0].data()[0], 0.0);
        step(&mut s, &mut theta, 0.0);
        assert!((s.m[0].data()[0] - 0.18).abs() < 1e-15);
        assert!((s.v[0].data()[0] - 0.04 * 0.999).abs() < 1e-15);
        assert!(theta.data()[0] < before.data()[0]);
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let (mut s, mut theta) = scalar_state();
        step(&mut s, &mut theta, 1.0);
        // m̂ = 1, v̂ = 1: the step is lr / (1 + ε).
        assert!((theta.data()[0] + 5e-4 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn three_steps_match_the_recurrence() {
        let (mut s, mut theta) = scalar_state();
        let grads = [0.5, -2.0, 1.25];
        let (b1, b2, lr, eps) = (0.9f64, 0.999f64, 5e-4, 1e-8);
        let (mut m, mut v, mut want) = (0.0, 0.0, 0.0);
        for (i, g) in grads.iter().enumerate() {
            step(&mut s, &mut theta, *g);
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            want -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        assert!((theta.data()[0] - want).abs() < 1e-15);
        assert!(want < 0.0 && want > -2e-3);
    }

    #[test]
    fn non_finite_gradient_names_the_block() {
        let (mut s, mut theta) = scalar_state();
        let bad = Tensor::from_f64([1], &[f64::NAN]).unwrap();
        let err = s.update(&mut [("dynamic.flow.w".into(), &mut theta)], &[bad]).unwrap_err();
        assert!(err.to_string().contains("dynamic.flow.w"));
        assert_eq!(s.step, 0);
        assert_eq!(theta.data()[0], 0.0);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op_on_parameters() {
        let mut s = AdamState::<f32>::new(AdamConfig { lr: 0.0, ..Default::default() }, &[vec![2]]);
        let mut p = Tensor::from_f64([2], &[0.25, -1.0]).unwrap();
        let g = Tensor::from_f64([2], &[3.0, -0.5]).unwrap();
        s.update(&mut [("p".into(), &mut p)], &[g]).unwrap();
        assert_eq!(p.data(), &[0.25, -1.0]);
    }
}
