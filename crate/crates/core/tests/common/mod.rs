//! Independent oracles shared by the integration tests. Nothing here calls
//! into the library's own gradient or diagnostic code.
#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use srrl::denoiser::{Condition, NoiseModel, ParamGradients, StateVector, TensorSlot};
use srrl::harness::{Checkpoint, ExperimentConfig};
use srrl::DenoiserParams;

pub fn manifest_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

/// Central differences of `f` at `theta`, one coordinate at a time.
pub fn central_fd(theta: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            probe[i] = theta[i] + h;
            let up = f(&probe);
            probe[i] = theta[i] - h;
            let down = f(&probe);
            probe[i] = theta[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i - n_i| / max_i |n_i|`: relative error in the max norm, so
/// components that are zero in both vectors do not divide by zero.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max) / scale
}

/// Composite Simpson rule with `n` (even) intervals.
pub fn simpson(a: f64, b: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    assert!(n.is_multiple_of(2));
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Log of a unit-variance Gaussian mixture density in one dimension.
pub fn log_mixture_1d(y: f64, modes: &[(f64, f64)]) -> f64 {
    let total: f64 = modes.iter().map(|m| m.1).sum();
    let p: f64 = modes.iter().map(|(mu, w)| w / total * (-(y - mu).powi(2) / 2.0).exp() / (2.0 * PI).sqrt()).sum();
    p.ln()
}

/// `alpha_bar` of a linear beta schedule, recomputed from scratch.
pub fn alpha_bars(steps: usize, beta_start: f64, beta_end: f64) -> Vec<f64> {
    let mut out = vec![1.0];
    for i in 0..steps {
        let beta =
            if steps == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64 };
        let last = *out.last().unwrap();
        out.push(last * (1.0 - beta));
    }
    out
}

/// One-dimensional model that is linear in `x` and in its parameters.
///
/// At `t = 2` it predicts `a x + b + u [c is a class]` with trainable
/// `(a, b, u)`. At `t = 1` it predicts the fixed `f x + g`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearStepModel {
    pub theta: [f64; 3],
    pub f: f64,
    pub g: f64,
}

impl NoiseModel for LinearStepModel {
    fn dim(&self) -> usize {
        1
    }

    fn num_steps(&self) -> usize {
        2
    }

    fn predict_noise(&self, x: &StateVector, c: Condition, t: usize) -> StateVector {
        let [a, b, u] = self.theta;
        let class = if matches!(c, Condition::Class(_)) { 1.0 } else { 0.0 };
        let v = match t {
            2 => a * x[0] + b + u * class,
            1 => self.f * x[0] + self.g,
            _ => panic!("timestep {t}"),
        };
        StateVector::new(vec![v])
    }

    fn backprop(&self, x: &StateVector, c: Condition, t: usize, upstream: &StateVector) -> ParamGradients {
        let class = if matches!(c, Condition::Class(_)) { 1.0 } else { 0.0 };
        let up = upstream[0];
        match t {
            2 => ParamGradients::from_vec(vec![up * x[0], up, up * class]),
            _ => ParamGradients::zeros(3),
        }
    }

    fn trainable_layout(&self) -> Vec<TensorSlot> {
        vec![TensorSlot { name: "theta".into(), len: 3 }]
    }

    fn visit_trainable(&self, f: &mut dyn FnMut(&[f64])) {
        f(&self.theta)
    }

    fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.theta)
    }
}

/// Expected reward of the two-step linear instance at guidance `lambda = 0`,
/// `eta = 1`, class condition, `x_2 ~ N(0, 1)`, and reward `reward`.
///
/// The final sample is an affine function of two independent standard
/// normals, so it is Gaussian with closed-form mean and variance and the
/// expectation reduces to a one-dimensional integral.
pub fn linear_expected_reward(theta: &[f64], f: f64, g: f64, ab: &[f64], reward: &dyn Fn(f64) -> f64) -> f64 {
    let (a, b, u) = (theta[0], theta[1], theta[2]);
    // t = 2, eta = 1
    let sigma2 = ((1.0 - ab[1]) / (1.0 - ab[2])).sqrt() * (1.0 - ab[2] / ab[1]).sqrt();
    let s2 = (ab[1] / ab[2]).sqrt();
    let n2 = (1.0 - ab[1] - sigma2 * sigma2).sqrt() - s2 * (1.0 - ab[2]).sqrt();
    // t = 1 is deterministic: x0 = s1 x1 + n1 (f x1 + g)
    let s1 = (1.0 / ab[1]).sqrt();
    let n1 = -((1.0 - ab[1]) / ab[1]).sqrt();
    let gamma = s1 + n1 * f;
    let mean = gamma * n2 * (b + u) + n1 * g;
    let var = gamma * gamma * ((s2 + n2 * a).powi(2) + sigma2 * sigma2);
    let sd = var.sqrt();
    simpson(mean - 12.0 * sd, mean + 12.0 * sd, 4000, |y| {
        reward(y) * (-(y - mean).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
    })
}

/// The pinned relational checkpoint shipped with the tests, with the
/// configuration it was produced from.
pub fn pinned_checkpoint() -> (ExperimentConfig, DenoiserParams) {
    let cfg = ExperimentConfig::load(&manifest_path("configs/relational.cfg"), &[]).unwrap();
    let ck = Checkpoint::load(&manifest_path("tests/data/relational_trained_seed0.json")).unwrap();
    let params = ck.params().unwrap();
    (cfg, params)
}
