//! Reward oracles, group-normalised advantages, contrastive selection and the
//! clipped policy-gradient objective.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Condition, NoiseModel, ParamGradients, StateVector};
use crate::error::{Error, Result};
use crate::sampler::{step_log_prob, step_log_prob_grad, RoundTrajectory};
use crate::schedule::NoiseSchedule;
use crate::stats::mean_std;

/// One unit-covariance component of a reward mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardMode {
    pub mean: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RewardOracle {
    /// Log density of the condition's unit-covariance Gaussian mixture.
    ModeAffinity { targets: BTreeMap<usize, Vec<RewardMode>> },
    /// `logistic(sharpness * (x[a] - x[b] - margin))`
    RelationalConstraint { index_a: usize, index_b: usize, margin: f64, sharpness: f64 },
    /// Same reward everywhere; every group it produces is degenerate.
    Constant(f64),
}

impl RewardOracle {
    pub fn validate(&self) -> Result<()> {
        match self {
            RewardOracle::ModeAffinity { targets } => {
                for (c, modes) in targets {
                    if modes.is_empty() {
                        return Err(Error::Invalid(format!("condition {c} has no reward modes")));
                    }
                    if modes.iter().any(|m| !(m.weight.is_finite() && m.weight > 0.0)) {
                        return Err(Error::Invalid(format!("condition {c} has a non-positive mode weight")));
                    }
                }
                Ok(())
            }
            RewardOracle::RelationalConstraint { index_a, index_b, margin, sharpness } => {
                if index_a == index_b {
                    return Err(Error::Invalid("relational indices must differ".into()));
                }
                if !(sharpness.is_finite() && *sharpness > 0.0 && margin.is_finite()) {
                    return Err(Error::Invalid("relational sharpness must be > 0 and margin finite".into()));
                }
                Ok(())
            }
            RewardOracle::Constant(v) if !v.is_finite() => Err(Error::Invalid("constant reward must be finite".into())),
            RewardOracle::Constant(_) => Ok(()),
        }
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn evaluate_reward(oracle: &RewardOracle, x: &StateVector, c: Condition) -> Result<f64> {
    match oracle {
        RewardOracle::ModeAffinity { targets } => {
            let modes =
                c.class_id().and_then(|id| targets.get(&id)).ok_or_else(|| Error::MissingTargets(c.to_string()))?;
            let total: f64 = modes.iter().map(|m| m.weight).sum();
            let d = x.dim() as f64;
            let logs: Vec<f64> = modes
                .iter()
                .map(|m| {
                    if m.mean.len() != x.dim() {
                        return Err(Error::DimensionMismatch { expected: m.mean.len(), got: x.dim() });
                    }
                    let sq: f64 = x.as_slice().iter().zip(&m.mean).map(|(a, b)| (a - b).powi(2)).sum();
                    Ok((m.weight / total).ln() - 0.5 * sq - 0.5 * d * (2.0 * PI).ln())
                })
                .collect::<Result<_>>()?;
            let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Ok(max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
        }
        RewardOracle::RelationalConstraint { index_a, index_b, margin, sharpness } => {
            let need = index_a.max(index_b) + 1;
            if x.dim() < need {
                return Err(Error::DimensionMismatch { expected: need, got: x.dim() });
            }
            Ok(logistic(sharpness * (x[*index_a] - x[*index_b] - margin)))
        }
        RewardOracle::Constant(v) => Ok(*v),
    }
}

/// Rewards of one group with their standardised advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardGroup {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub degenerate: bool,
}

/// Below this population standard deviation a group carries no signal.
pub const DEGENERATE_STD: f64 = 1e-8;

/// `(r - mean) / std` with the population standard deviation.
pub fn normalize_advantages(rewards: &[f64]) -> Result<RewardGroup> {
    if rewards.len() < 2 {
        return Err(Error::domain(format!("group needs at least 2 rewards, got {}", rewards.len())));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::domain("non-finite reward"));
    }
    let (mean, std) = mean_std(rewards);
    if std < DEGENERATE_STD {
        return Ok(RewardGroup { rewards: rewards.to_vec(), advantages: vec![0.0; rewards.len()], degenerate: true });
    }
    let advantages = rewards.iter().map(|r| (r - mean) / std).collect();
    Ok(RewardGroup { rewards: rewards.to_vec(), advantages, degenerate: false })
}

/// Indices of the maximum and minimum reward, lowest index on ties. `None`
/// for degenerate groups.
pub fn contrastive_select(group: &RewardGroup) -> Option<(usize, usize)> {
    if group.degenerate {
        return None;
    }
    let mut i_max = 0;
    let mut i_min = 0;
    for (i, &r) in group.rewards.iter().enumerate() {
        if r > group.rewards[i_max] {
            i_max = i;
        }
        if r < group.rewards[i_min] {
            i_min = i;
        }
    }
    (i_max != i_min).then_some((i_max, i_min))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateValue {
    pub objective: f64,
    pub clip_fraction: f64,
}

/// Per-step clipped surrogate. Returns the value and whether the clipped
/// branch is binding (in which case the step carries no gradient).
pub fn clipped_term(ratio: f64, advantage: f64, clip_eps: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if clipped < unclipped {
        (clipped, true)
    } else {
        (unclipped, false)
    }
}

fn check_clip(clip_eps: f64) -> Result<()> {
    if clip_eps > 0.0 && clip_eps < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("clip_eps {clip_eps} outside (0, 1)")))
    }
}

/// Sum over stochastic steps of `min(rho A, clip(rho) A)`, with `rho` the
/// density ratio of `model` to the sampling-time policy.
pub fn ppo_objective<M: NoiseModel + ?Sized>(
    traj: &RoundTrajectory,
    model: &M,
    schedule: &NoiseSchedule,
    advantage: f64,
    clip_eps: f64,
) -> Result<SurrogateValue> {
    check_clip(clip_eps)?;
    let mut objective = 0.0;
    let mut clipped = 0usize;
    let mut count = 0usize;
    for step in traj.stochastic_steps() {
        let old = step.log_prob_old.expect("filtered");
        let new = step_log_prob(model, schedule, step, traj.condition, traj.lambda)?;
        let (value, binding) = clipped_term((new - old).exp(), advantage, clip_eps);
        objective += value;
        clipped += binding as usize;
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoStochasticSteps);
    }
    Ok(SurrogateValue { objective, clip_fraction: clipped as f64 / count as f64 })
}

/// Exact gradient of [`ppo_objective`] with respect to the trainable
/// parameters of `model`.
pub fn ppo_gradient<M: NoiseModel + ?Sized>(
    traj: &RoundTrajectory,
    model: &M,
    schedule: &NoiseSchedule,
    advantage: f64,
    clip_eps: f64,
) -> Result<ParamGradients> {
    check_clip(clip_eps)?;
    let mut grad = ParamGradients::zeros(model.num_trainable());
    let mut count = 0usize;
    for step in traj.stochastic_steps() {
        count += 1;
        let old = step.log_prob_old.expect("filtered");
        let (new, g) = step_log_prob_grad(model, schedule, step, traj.condition, traj.lambda)?;
        let ratio = (new - old).exp();
        let (_, binding) = clipped_term(ratio, advantage, clip_eps);
        if !binding {
            grad.axpy(ratio * advantage, &g);
        }
    }
    if count == 0 {
        return Err(Error::NoStochasticSteps);
    }
    Ok(grad)
}

/// Score-function estimator `sum_t grad log p(x_{t-1} | x_t, c) * reward`
/// over the stochastic steps.
pub fn reinforce_gradient<M: NoiseModel + ?Sized>(
    traj: &RoundTrajectory,
    model: &M,
    schedule: &NoiseSchedule,
    reward: f64,
) -> Result<ParamGradients> {
    let mut grad = ParamGradients::zeros(model.num_trainable());
    let mut count = 0usize;
    for step in traj.stochastic_steps() {
        count += 1;
        let (_, g) = step_log_prob_grad(model, schedule, step, traj.condition, traj.lambda)?;
        grad.axpy(reward, &g);
    }
    if count == 0 {
        return Err(Error::NoStochasticSteps);
    }
    Ok(grad)
}
