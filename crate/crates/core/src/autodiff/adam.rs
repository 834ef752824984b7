use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-12,
        }
    }
}

/// Per-parameter moment estimates plus the shared step counter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            config,
            step: 0,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction and decoupled weight decay.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Contract(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(Error::Contract(format!(
                "adam: parameter {i} has shape {:?}, gradient {:?}, moments {:?}",
                p.shape(),
                g.shape(),
                state.first[i].shape()
            )));
        }
    }
    state.step += 1;
    let c = &state.config;
    let t = state.step as f64;
    let bc1 = 1.0 - c.beta1.powf(t);
    let bc2 = 1.0 - c.beta2.powf(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p[i]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = vec![Tensor::vector(vec![0.3, -1.2, 7.0])];
        let before = p.clone();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimizerState::new(cfg, &p);
        for _ in 0..5 {
            adam_step(&mut p, &[Tensor::zeros(&[3])], &mut st).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step(), 5);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // m̂ = g, v̂ = g² on the first step, so the update is -lr·g/(|g| + eps).
        let mut p = vec![Tensor::scalar(0.0)];
        let mut st = OptimizerState::new(
            AdamConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &p,
        );
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut st).unwrap();
        let expected = -5e-5 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn defaults() {
        let c = AdamConfig::default();
        assert_eq!((c.lr, c.weight_decay), (5e-5, 1e-12));
        assert_eq!((c.beta1, c.beta2, c.eps), (0.9, 0.999, 1e-8));
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut st = OptimizerState::new(AdamConfig::default(), &p);
        let err = adam_step(&mut p, &[Tensor::zeros(&[3])], &mut st).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert_eq!(st.step(), 0);
    }
}
