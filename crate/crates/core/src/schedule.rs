//! Variance schedule and closed-form forward-process quantities.
//!
//! Timesteps run `1..=T`. `alpha_bar(0)` is defined as 1 so that denoising to
//! `t = 0` yields a clean sample.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::StateVector;
use crate::error::{check_dim, Error, Result};

/// The three numbers a schedule is rebuilt from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        // 1e-4..0.02 leaves alpha_bar(20) at 0.82, far from pure noise; this
        // range brings it to about 0.009 over 20 steps.
        Self { steps: 20, beta_start: 1e-3, beta_end: 0.4 }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }

    /// Same total noise budget spread over a different number of steps.
    pub fn rescaled(&self, steps: usize) -> Self {
        let k = self.steps as f64 / steps as f64;
        Self { steps, beta_start: self.beta_start * k, beta_end: self.beta_end * k }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    // index 0 holds alpha_bar(0) = 1
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas, both endpoints included.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::domain("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::domain(format!("require 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}")));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for a in &alphas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * a);
        }
        Ok(Self { spec: ScheduleSpec { steps, beta_start, beta_end }, betas, alphas, alpha_bars })
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    /// `betas[t - 1]` is beta at timestep `t`.
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// Cumulative products for `t = 1..=T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars[1..]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Valid for `t = 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            Err(Error::domain(format!("timestep {t} outside 1..={}", self.num_steps())))
        } else {
            Ok(())
        }
    }

    /// Closed-form marginal `sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`.
    pub fn q_sample(&self, x0: &StateVector, t: usize, noise: &StateVector) -> Result<StateVector> {
        self.check_timestep(t)?;
        check_dim(x0.dim(), noise.dim())?;
        let ab = self.alpha_bar(t);
        Ok(x0.scaled(ab.sqrt()).add_scaled(noise, (1.0 - ab).sqrt()))
    }

    /// One Markov step of the forward chain, `x_t ~ N(sqrt(alpha_t) x_{t-1}, beta_t I)`.
    pub fn q_step<R: Rng + ?Sized>(&self, x_prev: &StateVector, t: usize, rng: &mut R) -> StateVector {
        let noise = crate::rng::gaussian(rng, x_prev.dim());
        x_prev.scaled(self.alpha(t).sqrt()).add_scaled(&noise, self.beta(t).sqrt())
    }
}
