use serde::{Deserialize, Serialize};

use super::params::{Gradients, Params};
use crate::error::{MascError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight decay; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Params,
    second: Params,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &Params) -> Self {
        AdamState { config, first: params.zeros_like(), second: params.zeros_like(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update in place. Gradients are checked before any
/// parameter is touched, so a rejected step leaves `params` and `state` intact.
pub fn adam_step(state: &mut AdamState, params: &mut Params, grads: &Gradients) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.first) {
        return Err(MascError::shape("parameter, gradient and optimizer layouts differ"));
    }
    if !grads.all_finite() {
        return Err(MascError::Diverged("non-finite gradient".into()));
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - c.beta1.powf(t);
    let bc2 = 1.0 - c.beta2.powf(t);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let g = grads.get(name).unwrap().as_slice();
        let m = state.first.get_mut(name).unwrap().as_mut_slice();
        let v = state.second.get_mut(name).unwrap().as_mut_slice();
        let p = params.get_mut(name).unwrap().as_mut_slice();
        for i in 0..p.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            if c.weight_decay > 0.0 {
                p[i] -= c.lr * c.weight_decay * p[i];
            }
            p[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    if !params.all_finite() {
        return Err(MascError::Diverged("non-finite parameters after update".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn theta(v: Vec<f64>) -> Params {
        let mut p = Params::new();
        p.insert("theta", Matrix::column(v).unwrap());
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = theta(vec![1.0, -2.0]);
        let before = p.clone();
        let mut s = AdamState::new(AdamConfig::default(), &p);
        let g = p.zeros_like();
        adam_step(&mut s, &mut p, &g).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn descends_on_square() {
        let mut p = theta(vec![1.0]);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut s = AdamState::new(cfg, &p);
        let g = theta(vec![2.0]);
        adam_step(&mut s, &mut p, &g).unwrap();
        assert!(p.get("theta").unwrap().as_slice()[0] < 1.0);
    }

    // f(θ) = Σ a_i (θ_i − c_i)², optimum θ* = c.
    #[test]
    fn converges_on_convex_quadratic() {
        let a = [1.0, 3.0, 0.5];
        let target = [0.7, -1.2, 2.0];
        let mut p = theta(vec![0.0; 3]);
        let mut s = AdamState::new(AdamConfig { lr: 0.05, ..AdamConfig::default() }, &p);
        for _ in 0..200 {
            let x = p.get("theta").unwrap().as_slice().to_vec();
            let g = theta((0..3).map(|i| 2.0 * a[i] * (x[i] - target[i])).collect());
            adam_step(&mut s, &mut p, &g).unwrap();
        }
        let x = p.get("theta").unwrap().as_slice();
        let err = x.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(err < 1e-3, "distance to optimum {err}");
    }

    #[test]
    fn nan_gradient_is_rejected_without_mutation() {
        let mut p = theta(vec![1.0]);
        let before = p.clone();
        let mut s = AdamState::new(AdamConfig::default(), &p);
        let mut g = p.zeros_like();
        g.get_mut("theta").unwrap().as_mut_slice()[0] = f64::NAN;
        assert!(matches!(adam_step(&mut s, &mut p, &g), Err(MascError::Diverged(_))));
        assert_eq!(p, before);
        assert_eq!(s.step_count(), 0);
    }
}
