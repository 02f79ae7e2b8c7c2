use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
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

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update of every parameter; gradients are cleared
/// afterwards.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::ShapeMismatch("optimizer state does not match the parameter set".into()));
    }
    for (_, p) in params.iter() {
        if p.grad.is_none() {
            return Err(Error::MissingGrad(p.name.clone()));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for id in params.ids().collect::<Vec<_>>() {
        let p = params.get_mut(id);
        let g = p.grad.take().unwrap_or_default();
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        for k in 0..g.len() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p.value.data[k] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamGroup;
    use crate::nn::tensor::Tensor;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", ParamGroup::Encoder, Tensor::scalar(v));
        s
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut s = store(1.5);
        let mut st = AdamState::new(&s, AdamConfig::default());
        s.accumulate_grad(crate::nn::ParamId(0), &[0.0]);
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(s.get(crate::nn::ParamId(0)).value.data[0], 1.5);
        assert_eq!(st.step, 1);
        assert!(s.get(crate::nn::ParamId(0)).grad.is_none());
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02] {
            let mut s = store(0.0);
            let mut st = AdamState::new(&s, AdamConfig::default());
            s.accumulate_grad(crate::nn::ParamId(0), &[g]);
            adam_step(&mut s, &mut st).unwrap();
            // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
            let expected = -5e-4 * g / (g.abs() + 1e-8);
            assert!((s.get(crate::nn::ParamId(0)).value.data[0] - expected).abs() < 1e-15);
            assert!((expected.abs() - 5e-4).abs() < 1e-9);
        }
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut s = store(0.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        assert!(matches!(adam_step(&mut s, &mut st), Err(Error::MissingGrad(_))));
        assert_eq!(st.step, 0);
    }
}
