use serde::{Deserialize, Serialize};

use super::{NoiseModel, ParamGradients};
use crate::error::{check_dim, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, weight_decay: 1e-4, eps: 1e-8 }
    }
}

/// Adam moments for the trainable parameters of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new<M: NoiseModel + ?Sized>(model: &M, config: OptimizerConfig) -> Self {
        let n = model.num_trainable();
        Self { config, first: vec![0.0; n], second: vec![0.0; n], step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }
}

/// Bias-corrected Adam step with decoupled weight decay. `grads` is the
/// gradient of the loss being minimised.
pub fn adam_update<M: NoiseModel + ?Sized>(
    model: &mut M,
    opt: &mut OptimizerState,
    grads: &ParamGradients,
) -> Result<()> {
    check_dim(opt.len(), grads.len())?;
    check_dim(opt.len(), model.num_trainable())?;
    opt.step += 1;
    let OptimizerConfig { lr, beta1, beta2, weight_decay, eps } = opt.config;
    let bc1 = 1.0 - beta1.powi(opt.step as i32);
    let bc2 = 1.0 - beta2.powi(opt.step as i32);
    let g = grads.as_slice();
    let (m, v) = (&mut opt.first, &mut opt.second);
    let mut offset = 0;
    model.visit_trainable_mut(&mut |params| {
        for (j, p) in params.iter_mut().enumerate() {
            let k = offset + j;
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *p);
        }
        offset += params.len();
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserParams, NetworkSpec};
    use crate::error::Error;
    use crate::rng;

    fn model() -> DenoiserParams {
        let spec = NetworkSpec { dim: 2, num_classes: 2, num_steps: 5, time_embed_width: 2, hidden: vec![3] };
        DenoiserParams::init(spec, &mut rng::master(9)).unwrap()
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut p = model();
        let before = p.clone();
        let cfg = OptimizerConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = OptimizerState::new(&p, cfg);
        let zero = ParamGradients::zeros(p.num_trainable());
        adam_update(&mut p, &mut opt, &zero).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_is_sign_like() {
        let mut p = model();
        let before = p.trainable_vector();
        let cfg = OptimizerConfig { lr: 0.01, weight_decay: 0.0, ..Default::default() };
        let mut opt = OptimizerState::new(&p, cfg);
        let g: Vec<f64> = (0..p.num_trainable()).map(|i| (i as f64 - 10.0) * 0.37).collect();
        adam_update(&mut p, &mut opt, &ParamGradients::from_vec(g.clone())).unwrap();
        // m_hat = g and v_hat = g^2 after one step.
        for ((a, b), gi) in p.trainable_vector().iter().zip(&before).zip(&g) {
            let expected = b - 0.01 * gi / (gi.abs() + 1e-8);
            assert!((a - expected).abs() < 1e-15, "{a} vs {expected}");
        }
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = model();
        let before = p.trainable_vector();
        let cfg = OptimizerConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut opt = OptimizerState::new(&p, cfg);
        let zero = ParamGradients::zeros(p.num_trainable());
        adam_update(&mut p, &mut opt, &zero).unwrap();
        for (a, b) in p.trainable_vector().iter().zip(&before) {
            assert!((a - b * (1.0 - 0.05)).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic_trajectories() {
        let run = || {
            let mut p = model();
            let mut opt = OptimizerState::new(&p, OptimizerConfig::default());
            let g = ParamGradients::from_vec((0..p.num_trainable()).map(|i| (i as f64).sin()).collect());
            for _ in 0..5 {
                adam_update(&mut p, &mut opt, &g).unwrap();
            }
            p.trainable_vector().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch() {
        let mut p = model();
        let mut opt = OptimizerState::new(&p, OptimizerConfig::default());
        let err = adam_update(&mut p, &mut opt, &ParamGradients::zeros(3)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }
}
