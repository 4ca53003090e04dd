//! Trajectory mechanics: guided noise, DDIM denoising with step densities,
//! DDIM inversion, and the guidance-gap diagnostic.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Condition, NoiseModel, ParamGradients, StateVector};
use crate::error::{check_dim, Error, Result};
use crate::rng::{self, SimRng};
use crate::schedule::NoiseSchedule;

/// Guidance scales, in the `eps_c + lambda (eps_c - eps_null)` convention:
/// `lambda = 0` is purely conditional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub lambda_denoise: f64,
    pub lambda_forward: f64,
    pub lambda_inference: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { lambda_denoise: 3.0, lambda_forward: 0.5, lambda_inference: 7.5 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_denoise", self.lambda_denoise),
            ("lambda_forward", self.lambda_forward),
            ("lambda_inference", self.lambda_inference),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Invalid(format!("guidance.{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// One denoising transition `x_t -> x_{t-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub t: usize,
    pub state_before: StateVector,
    pub state_after: StateVector,
    /// Log density of `state_after` under the sampling policy; `None` for
    /// deterministic steps.
    pub log_prob_old: Option<f64>,
    pub sigma: f64,
}

/// A full denoising pass `x_T -> x_0` of one reflection round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrajectory {
    pub round_index: usize,
    pub condition: Condition,
    pub lambda: f64,
    pub eta: f64,
    /// Ordered `t = T..1`.
    pub steps: Vec<TrajectoryStep>,
    pub terminal: StateVector,
}

impl RoundTrajectory {
    pub fn initial(&self) -> &StateVector {
        &self.steps[0].state_before
    }

    pub fn stochastic_steps(&self) -> impl Iterator<Item = &TrajectoryStep> {
        self.steps.iter().filter(|s| s.log_prob_old.is_some())
    }

    pub fn check_invariants(&self, num_steps: usize) -> Result<()> {
        if self.steps.len() != num_steps {
            return Err(Error::domain(format!("trajectory has {} steps, expected {num_steps}", self.steps.len())));
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.t != num_steps - i {
                return Err(Error::domain("trajectory steps must descend T..1"));
            }
            if s.sigma < 0.0 || s.log_prob_old.is_some() != (s.sigma > 0.0) {
                return Err(Error::domain(format!("step {} has inconsistent density marker", s.t)));
            }
            if i > 0 && self.steps[i - 1].state_after != s.state_before {
                return Err(Error::domain("trajectory steps are not contiguous"));
            }
        }
        if self.steps.last().map(|s| &s.state_after) != Some(&self.terminal) {
            return Err(Error::domain("terminal does not match the last step"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub x_prev: StateVector,
    pub log_prob: Option<f64>,
    pub sigma: f64,
}

/// Guided noise `eps_c + lambda (eps_c - eps_null)`.
pub fn cfg_noise<M: NoiseModel + ?Sized>(
    model: &M,
    x: &StateVector,
    c: Condition,
    t: usize,
    lambda: f64,
) -> StateVector {
    let cond = model.predict_noise(x, c, t);
    if lambda == 0.0 {
        return cond;
    }
    let uncond = model.predict_noise(x, Condition::Null, t);
    cond.add_scaled(&cond.sub(&uncond), lambda)
}

/// Parameter gradient of `<cfg_noise(..), upstream>`.
pub fn cfg_backprop<M: NoiseModel + ?Sized>(
    model: &M,
    x: &StateVector,
    c: Condition,
    t: usize,
    lambda: f64,
    upstream: &StateVector,
) -> ParamGradients {
    let mut g = model.backprop(x, c, t, upstream);
    if lambda != 0.0 {
        g.scale(1.0 + lambda);
        g.axpy(-lambda, &model.backprop(x, Condition::Null, t, upstream));
    }
    g
}

/// Scalar coefficients of one DDIM step at timestep `t`:
/// `mean = state_coef * x_t + noise_coef * eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub sigma: f64,
    pub state_coef: f64,
    pub noise_coef: f64,
}

impl StepCoefficients {
    pub fn new(schedule: &NoiseSchedule, t: usize, eta: f64) -> Result<Self> {
        schedule.check_timestep(t)?;
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::domain(format!("eta {eta} outside [0, 1]")));
        }
        let ab_t = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t - 1);
        let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt();
        Self::with_sigma(schedule, t, sigma)
    }

    pub fn with_sigma(schedule: &NoiseSchedule, t: usize, sigma: f64) -> Result<Self> {
        let ab_t = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t - 1);
        let dir_sq = 1.0 - ab_prev - sigma * sigma;
        // Rounding can leave -1e-17 at t = 1.
        if dir_sq < -1e-12 {
            return Err(Error::domain(format!("negative direction variance {dir_sq} at t={t}")));
        }
        let root = (ab_prev / ab_t).sqrt();
        Ok(Self { sigma, state_coef: root, noise_coef: dir_sq.max(0.0).sqrt() - root * (1.0 - ab_t).sqrt() })
    }

    pub fn mean(&self, x_t: &StateVector, eps: &StateVector) -> StateVector {
        x_t.scaled(self.state_coef).add_scaled(eps, self.noise_coef)
    }
}

/// Isotropic Gaussian log density.
pub fn gaussian_log_density(x: &StateVector, mean: &StateVector, sigma: f64) -> f64 {
    let d = x.dim() as f64;
    -x.dist_sq(mean) / (2.0 * sigma * sigma) - 0.5 * d * (2.0 * PI * sigma * sigma).ln()
}

/// One DDIM step. `noise` is only used when the step variance is positive.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<M: NoiseModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x_t: &StateVector,
    c: Condition,
    t: usize,
    lambda: f64,
    eta: f64,
    noise: &StateVector,
) -> Result<StepOutput> {
    check_dim(model.dim(), x_t.dim())?;
    check_dim(x_t.dim(), noise.dim())?;
    let coef = StepCoefficients::new(schedule, t, eta)?;
    let eps = cfg_noise(model, x_t, c, t, lambda);
    let mean = coef.mean(x_t, &eps);
    if coef.sigma > 0.0 {
        let x_prev = mean.add_scaled(noise, coef.sigma);
        let log_prob = gaussian_log_density(&x_prev, &mean, coef.sigma);
        Ok(StepOutput { x_prev, log_prob: Some(log_prob), sigma: coef.sigma })
    } else {
        Ok(StepOutput { x_prev: mean, log_prob: None, sigma: 0.0 })
    }
}

/// Log density of a recorded transition under `model`.
pub fn step_log_prob<M: NoiseModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    step: &TrajectoryStep,
    c: Condition,
    lambda: f64,
) -> Result<f64> {
    if step.sigma <= 0.0 {
        return Err(Error::NoStochasticSteps);
    }
    let coef = StepCoefficients::with_sigma(schedule, step.t, step.sigma)?;
    let eps = cfg_noise(model, &step.state_before, c, step.t, lambda);
    Ok(gaussian_log_density(&step.state_after, &coef.mean(&step.state_before, &eps), step.sigma))
}

/// Parameter gradient of [`step_log_prob`].
pub fn step_log_prob_grad<M: NoiseModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    step: &TrajectoryStep,
    c: Condition,
    lambda: f64,
) -> Result<(f64, ParamGradients)> {
    if step.sigma <= 0.0 {
        return Err(Error::NoStochasticSteps);
    }
    let coef = StepCoefficients::with_sigma(schedule, step.t, step.sigma)?;
    let eps = cfg_noise(model, &step.state_before, c, step.t, lambda);
    let mean = coef.mean(&step.state_before, &eps);
    let log_prob = gaussian_log_density(&step.state_after, &mean, step.sigma);
    // d log p / d eps = noise_coef * (x_prev - mean) / sigma^2
    let upstream = step.state_after.sub(&mean).scaled(coef.noise_coef / (step.sigma * step.sigma));
    let grad = cfg_backprop(model, &step.state_before, c, step.t, lambda, &upstream);
    Ok((log_prob, grad))
}

/// Denoises `x_T` through `t = T..1`, recording every transition.
pub fn sample_round<M: NoiseModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x_t: &StateVector,
    c: Condition,
    lambda: f64,
    eta: f64,
    rng: &mut SimRng,
) -> Result<RoundTrajectory> {
    if !x_t.is_finite() {
        return Err(Error::domain("initial state is not finite"));
    }
    let mut steps = Vec::with_capacity(schedule.num_steps());
    let mut x = x_t.clone();
    for t in (1..=schedule.num_steps()).rev() {
        let noise = rng::gaussian(rng, x.dim());
        let out = ddim_step(model, schedule, &x, c, t, lambda, eta, &noise)?;
        steps.push(TrajectoryStep {
            t,
            state_before: x,
            state_after: out.x_prev.clone(),
            log_prob_old: out.log_prob,
            sigma: out.sigma,
        });
        x = out.x_prev;
    }
    Ok(RoundTrajectory { round_index: 0, condition: c, lambda, eta, steps, terminal: x })
}

/// Deterministic DDIM denoise without recording, `x_T -> x_0`.
pub fn denoise<M: NoiseModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x_t: &StateVector,
    c: Condition,
    lambda: f64,
) -> Result<StateVector> {
    let mut x = x_t.clone();
    for t in (1..=schedule.num_steps()).rev() {
        let coef = StepCoefficients::new(schedule, t, 0.0)?;
        let eps = cfg_noise(model, &x, c, t, lambda);
        x = coef.mean(&x, &eps);
    }
    Ok(x)
}

/// Exact algebraic inverse of the deterministic step at `t`, reusing the
/// noise predicted at `x_{t-1}`.
pub fn ddim_invert_step<M: NoiseModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x_prev: &StateVector,
    c: Condition,
    t: usize,
    lambda: f64,
) -> Result<StateVector> {
    schedule.check_timestep(t)?;
    check_dim(model.dim(), x_prev.dim())?;
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let eps = cfg_noise(model, x_prev, c, t, lambda);
    let state_coef = (ab_t / ab_prev).sqrt();
    let noise_coef = (1.0 - ab_t).sqrt() - (ab_t * (1.0 - ab_prev) / ab_prev).sqrt();
    let out = x_prev.scaled(state_coef).add_scaled(&eps, noise_coef);
    if !out.is_finite() {
        return Err(Error::domain(format!("inversion produced non-finite state at t={t}")));
    }
    Ok(out)
}

/// Inverts a clean sample up to `x_T` at guidance `lambda_forward`.
pub fn condition_guided_forward<M: NoiseModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x0: &StateVector,
    c: Condition,
    lambda_forward: f64,
) -> Result<StateVector> {
    if !x0.is_finite() {
        return Err(Error::domain("x0 is not finite"));
    }
    let mut x = x0.clone();
    for t in 1..=schedule.num_steps() {
        x = ddim_invert_step(model, schedule, &x, c, t, lambda_forward)?;
    }
    Ok(x)
}

/// Squared distance between inversions of `x0` at the two guidance scales.
pub fn guidance_gap<M: NoiseModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x0: &StateVector,
    c: Condition,
    lambda_forward: f64,
    lambda_denoise: f64,
) -> Result<f64> {
    if !(lambda_forward.is_finite() && lambda_denoise.is_finite()) {
        return Err(Error::domain("guidance scales must be finite"));
    }
    let a = condition_guided_forward(model, schedule, x0, c, lambda_forward)?;
    let b = condition_guided_forward(model, schedule, x0, c, lambda_denoise)?;
    Ok(a.dist_sq(&b))
}
