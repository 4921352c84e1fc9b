//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGrads, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One update of `theta` in place.
pub fn adam_step(theta: &mut [f64], grad: &[f64], state: &mut Moments, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if theta.len() != grad.len() || theta.len() != state.m.len() || state.v.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam state for {} values, got {} params and {} grads",
            state.m.len(),
            theta.len(),
            grad.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Optimizer state for a whole parameter store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub config: AdamConfig,
    state: Vec<Moments>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, config: AdamConfig) -> Self {
        Self {
            lr,
            config,
            state: params.ids().map(|id| Moments::zeros(params.get(id).len())).collect(),
        }
    }

    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        if grads.0.len() != self.state.len() {
            return Err(Error::Contract("gradient count differs from parameter count".into()));
        }
        for (id, (g, st)) in params.ids().collect::<Vec<_>>().into_iter().zip(grads.0.iter().zip(&mut self.state)) {
            if let Some(g) = g {
                adam_step(params.get_mut(id).data_mut(), g, st, self.lr, &self.config)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut theta = vec![1.0, -2.0];
        let mut st = Moments::zeros(2);
        adam_step(&mut theta, &[0.0, 0.0], &mut st, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(theta, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig::default();
        for g in [3.0, -0.02, 1e-3] {
            let mut theta = vec![0.5];
            let mut st = Moments::zeros(1);
            adam_step(&mut theta, &[g], &mut st, 0.01, &cfg).unwrap();
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
            let expect = 0.5 - 0.01 * g / (g.abs() + cfg.eps);
            assert!((theta[0] - expect).abs() < 1e-15);
            assert!((theta[0] - (0.5 - 0.01 * g.signum())).abs() < 1e-7);
        }
    }

    #[test]
    fn converges_on_quadratic() {
        // f(θ) = (θ − 3)²
        let mut theta = vec![-4.0];
        let mut st = Moments::zeros(1);
        for _ in 0..2000 {
            let g = [2.0 * (theta[0] - 3.0)];
            adam_step(&mut theta, &g, &mut st, 0.05, &AdamConfig::default()).unwrap();
        }
        assert!((theta[0] - 3.0).abs() < 1e-3, "{}", theta[0]);
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut theta = vec![0.0; 2];
        let mut st = Moments::zeros(3);
        assert!(matches!(
            adam_step(&mut theta, &[0.0, 0.0], &mut st, 0.1, &AdamConfig::default()),
            Err(Error::Contract(_))
        ));
    }
}
