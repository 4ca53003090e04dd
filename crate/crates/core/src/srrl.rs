//! Reflection chains, the training loop, and reflective inference.
//!
//! A chain at depth `k` runs `k` deterministic context rounds (denoise at
//! `lambda_denoise`, invert at `lambda_forward`) and then one recorded round
//! whose transitions are optimised. Depth grows `0..K`, with `E` batches per
//! depth and one parameter update per batch from the best and worst sample.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{
    adam_update, Condition, NoiseModel, OptimizerConfig, OptimizerState, ParamGradients, StateVector,
};
use crate::error::{Error, Result};
use crate::par::{map_indexed, Execution};
use crate::rl::{contrastive_select, evaluate_reward, normalize_advantages, ppo_gradient, ppo_objective, RewardOracle};
use crate::rng::{self, SimRng};
use crate::sampler::{condition_guided_forward, denoise, sample_round, GuidanceConfig, RoundTrajectory};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::stats::mean_std;

#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionChain {
    pub rounds: Vec<RoundTrajectory>,
    /// `renoise_inputs[k]` is the inverted `x_T` that starts round `k + 1`.
    pub renoise_inputs: Vec<StateVector>,
    pub condition: Condition,
}

impl ReflectionChain {
    pub fn final_round(&self) -> &RoundTrajectory {
        self.rounds.last().expect("chains have at least one round")
    }

    pub fn terminal(&self) -> &StateVector {
        &self.final_round().terminal
    }

    pub fn check_contiguity(&self) -> Result<()> {
        if self.renoise_inputs.len() + 1 != self.rounds.len() {
            return Err(Error::domain("chain needs one re-noised input between consecutive rounds"));
        }
        for (k, x) in self.renoise_inputs.iter().enumerate() {
            if self.rounds[k + 1].initial() != x {
                return Err(Error::domain(format!("round {} does not start at the inversion of round {k}", k + 1)));
            }
        }
        if self.rounds.iter().any(|r| r.condition != self.condition) {
            return Err(Error::domain("chain rounds disagree on the condition"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total reflection depth K; depths `0..K` are trained in order.
    pub rounds: usize,
    pub schedule: ScheduleSpec,
    pub group_size: usize,
    pub epochs: usize,
    pub guidance: GuidanceConfig,
    pub eta_final: f64,
    pub clip_eps: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub conditions: Vec<Condition>,
    pub oracle: RewardOracle,
    pub execution: Execution,
}

impl TrainConfig {
    pub fn new(conditions: Vec<Condition>, oracle: RewardOracle) -> Self {
        Self {
            rounds: 10,
            schedule: ScheduleSpec::default(),
            group_size: 32,
            epochs: 2,
            guidance: GuidanceConfig::default(),
            eta_final: 1.0,
            clip_eps: 0.2,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            conditions,
            oracle,
            execution: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if self.rounds < 1 {
            return bad("train.rounds must be >= 1");
        }
        if self.group_size < 2 {
            return bad("train.group_size must be >= 2");
        }
        if self.epochs < 1 {
            return bad("train.epochs must be >= 1");
        }
        if self.schedule.steps < 2 {
            return bad("schedule.steps must be >= 2");
        }
        if !(0.0..=1.0).contains(&self.eta_final) || self.eta_final == 0.0 {
            return bad("train.eta_final must be in (0, 1]");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("train.clip_eps must be in (0, 1)");
        }
        if self.conditions.is_empty() || self.conditions.contains(&Condition::Null) {
            return bad("training needs at least one class condition");
        }
        self.guidance.validate()?;
        self.oracle.validate()
    }
}

/// One row per (round, epoch) batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub round: usize,
    pub epoch: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub max_reward: f64,
    pub min_reward: f64,
    /// Mean clipped surrogate of the selected pair, re-evaluated after the
    /// update (zero when skipped).
    pub objective: f64,
    pub clip_fraction: f64,
    pub skipped: bool,
}

/// Samples a fresh `x_T`, runs `depth` context rounds, then one recorded round
/// at `eta_final`.
pub fn build_chain<M: NoiseModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    c: Condition,
    depth: usize,
    guidance: &GuidanceConfig,
    eta_final: f64,
    rng: &mut SimRng,
) -> Result<ReflectionChain> {
    let x_t = rng::gaussian(rng, model.dim());
    build_chain_from(model, schedule, &x_t, c, depth, guidance, eta_final, rng)
}

#[allow(clippy::too_many_arguments)]
pub fn build_chain_from<M: NoiseModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x_t: &StateVector,
    c: Condition,
    depth: usize,
    guidance: &GuidanceConfig,
    eta_final: f64,
    rng: &mut SimRng,
) -> Result<ReflectionChain> {
    let mut rounds = Vec::with_capacity(depth + 1);
    let mut renoise_inputs = Vec::with_capacity(depth);
    let mut x = x_t.clone();
    for k in 0..=depth {
        let eta = if k == depth { eta_final } else { 0.0 };
        let mut traj = sample_round(model, schedule, &x, c, guidance.lambda_denoise, eta, rng)?;
        traj.round_index = k;
        if k < depth {
            x = condition_guided_forward(model, schedule, &traj.terminal, c, guidance.lambda_forward)?;
            renoise_inputs.push(x.clone());
        }
        rounds.push(traj);
    }
    let chain = ReflectionChain { rounds, renoise_inputs, condition: c };
    chain.check_contiguity()?;
    Ok(chain)
}

pub fn train<M: NoiseModel + Clone>(config: &TrainConfig, pretrained: &M) -> Result<(M, Vec<MetricsRow>)> {
    train_with(config, pretrained, &mut |_| Ok(()))
}

/// Like [`train`], calling `on_row` after every batch.
pub fn train_with<M: NoiseModel + Clone>(
    config: &TrainConfig,
    pretrained: &M,
    on_row: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<(M, Vec<MetricsRow>)> {
    config.validate()?;
    let schedule = config.schedule.build()?;
    if pretrained.num_steps() != schedule.num_steps() {
        return Err(Error::Invalid(format!(
            "model expects {} steps, schedule has {}",
            pretrained.num_steps(),
            schedule.num_steps()
        )));
    }
    let mut model = pretrained.clone();
    let mut opt = OptimizerState::new(&model, config.optimizer);
    let mut master = rng::master(config.seed);
    let mut log = Vec::with_capacity(config.rounds * config.epochs);

    for depth in 0..config.rounds {
        for epoch in 0..config.epochs {
            let c = config.conditions[master.random_range(0..config.conditions.len())];
            let batch_seed: u64 = master.random();
            let current = &model;
            let chains = map_indexed(config.execution, config.group_size, |i| {
                let mut r = rng::stream(batch_seed, i);
                build_chain(current, &schedule, c, depth, &config.guidance, config.eta_final, &mut r)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let rewards = chains
                .iter()
                .map(|ch| evaluate_reward(&config.oracle, ch.terminal(), c))
                .collect::<Result<Vec<_>>>()?;
            let group = normalize_advantages(&rewards)?;
            let (mean, std) = mean_std(&rewards);
            let mut row = MetricsRow {
                round: depth,
                epoch,
                mean_reward: mean,
                std_reward: std,
                max_reward: rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                min_reward: rewards.iter().cloned().fold(f64::INFINITY, f64::min),
                objective: 0.0,
                clip_fraction: 0.0,
                skipped: true,
            };

            if let Some((i_max, i_min)) = contrastive_select(&group) {
                let selected = [(i_max, group.advantages[i_max]), (i_min, group.advantages[i_min])];
                let mut ascent = ParamGradients::zeros(model.num_trainable());
                for &(i, adv) in &selected {
                    let g = ppo_gradient(chains[i].final_round(), &model, &schedule, adv, config.clip_eps)?;
                    ascent.axpy(1.0 / selected.len() as f64, &g);
                }
                ascent.scale(-1.0);
                adam_update(&mut model, &mut opt, &ascent)?;

                let mut objective = 0.0;
                let mut clip = 0.0;
                for &(i, adv) in &selected {
                    let v = ppo_objective(chains[i].final_round(), &model, &schedule, adv, config.clip_eps)?;
                    objective += v.objective / selected.len() as f64;
                    clip += v.clip_fraction / selected.len() as f64;
                }
                row.objective = objective;
                row.clip_fraction = clip;
                row.skipped = false;
            }
            on_row(&row)?;
            log.push(row);
        }
    }
    Ok((model, log))
}

/// Outputs `x_0^0, .., x_0^depth` of deterministic reflective inference from
/// `x_t`: denoise at `lambda_inference`, invert at `lambda_forward`.
pub fn reflect_trace<M: NoiseModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x_t: &StateVector,
    c: Condition,
    depth: usize,
    guidance: &GuidanceConfig,
) -> Result<Vec<StateVector>> {
    let mut out = Vec::with_capacity(depth + 1);
    let mut x = x_t.clone();
    for k in 0..=depth {
        let x0 = denoise(model, schedule, &x, c, guidance.lambda_inference)?;
        if k < depth {
            x = condition_guided_forward(model, schedule, &x0, c, guidance.lambda_forward)?;
        }
        out.push(x0);
    }
    Ok(out)
}

pub fn reflect_sample<M: NoiseModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x_t: &StateVector,
    c: Condition,
    depth: usize,
    guidance: &GuidanceConfig,
) -> Result<StateVector> {
    Ok(reflect_trace(model, schedule, x_t, c, depth, guidance)?.pop().expect("depth + 1 outputs"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    pub conditions: Vec<Condition>,
    pub rounds: usize,
    pub guidance: GuidanceConfig,
    pub oracle: RewardOracle,
    pub samples_per_condition: usize,
    pub seed: u64,
    pub execution: Execution,
}

/// Mean oracle reward of `x_0^k` for `k = 0..=rounds`. All depths share the
/// same initial noises.
pub fn evaluate_rounds<M: NoiseModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    spec: &EvalSpec,
) -> Result<Vec<f64>> {
    if spec.samples_per_condition == 0 {
        return Err(Error::Invalid("evaluation needs at least one sample".into()));
    }
    let n = spec.samples_per_condition;
    let per_sample = map_indexed(spec.execution, spec.conditions.len() * n, |i| -> Result<Vec<f64>> {
        let c = spec.conditions[i / n];
        let x_t = rng::gaussian(&mut rng::stream(spec.seed, i), model.dim());
        reflect_trace(model, schedule, &x_t, c, spec.rounds, &spec.guidance)?
            .iter()
            .map(|x| evaluate_reward(&spec.oracle, x, c))
            .collect()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let total = per_sample.len() as f64;
    Ok((0..=spec.rounds).map(|k| per_sample.iter().map(|r| r[k]).sum::<f64>() / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserParams, NetworkSpec};

    fn sched() -> NoiseSchedule {
        ScheduleSpec { steps: 8, beta_start: 0.01, beta_end: 0.4 }.build().unwrap()
    }

    fn random_net(seed: u64) -> DenoiserParams {
        let spec = NetworkSpec { dim: 2, num_classes: 2, num_steps: 8, time_embed_width: 4, hidden: vec![16, 16] };
        let mut r = rng::master(seed);
        let mut p = DenoiserParams::init(spec, &mut r).unwrap();
        p.randomize(&mut r, 0.3);
        p
    }

    fn relational() -> RewardOracle {
        RewardOracle::RelationalConstraint { index_a: 0, index_b: 1, margin: 0.5, sharpness: 3.0 }
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            rounds: 2,
            schedule: ScheduleSpec { steps: 8, beta_start: 0.01, beta_end: 0.4 },
            group_size: 6,
            epochs: 2,
            ..TrainConfig::new(vec![Condition::Class(0), Condition::Class(1)], relational())
        }
    }

    #[test]
    fn depth_zero_is_single_recorded_round() {
        let s = sched();
        let chain = build_chain(
            &random_net(1),
            &s,
            Condition::Class(0),
            0,
            &GuidanceConfig::default(),
            1.0,
            &mut rng::master(2),
        )
        .unwrap();
        assert_eq!(chain.rounds.len(), 1);
        assert!(chain.renoise_inputs.is_empty());
        assert_eq!(chain.final_round().stochastic_steps().count(), 7);
    }

    #[test]
    fn zero_network_chain_closed_form() {
        let s = sched();
        let net = DenoiserParams::zeros(NetworkSpec::new(2, 2, 8)).unwrap();
        let x_t = StateVector::new(vec![0.7, -0.2]);
        let chain = build_chain_from(
            &net,
            &s,
            &x_t,
            Condition::Class(1),
            2,
            &GuidanceConfig::default(),
            0.0,
            &mut rng::master(0),
        )
        .unwrap();
        // each denoise scales by 1/sqrt(ab_T), each inversion by sqrt(ab_T)
        let ab = s.alpha_bar(8);
        let expected = x_t.scaled((1.0 / ab.sqrt()) * ab.sqrt() * (1.0 / ab.sqrt()) * ab.sqrt() * (1.0 / ab.sqrt()));
        assert!(chain.terminal().dist_sq(&expected).sqrt() < 1e-12);
        assert_eq!(chain.rounds.iter().map(|r| r.round_index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn chains_are_reproducible_and_contiguous() {
        let s = sched();
        let net = random_net(3);
        let a = build_chain(&net, &s, Condition::Class(0), 3, &GuidanceConfig::default(), 1.0, &mut rng::master(9))
            .unwrap();
        let b = build_chain(&net, &s, Condition::Class(0), 3, &GuidanceConfig::default(), 1.0, &mut rng::master(9))
            .unwrap();
        assert_eq!(a, b);
        a.check_contiguity().unwrap();
        let mut broken = a.clone();
        broken.renoise_inputs[1] = StateVector::new(vec![9.0, 9.0]);
        assert!(broken.check_contiguity().is_err());
    }

    #[test]
    fn zero_lr_training_is_noop() {
        let net = random_net(4);
        let cfg = TrainConfig {
            rounds: 1,
            epochs: 1,
            optimizer: OptimizerConfig { lr: 0.0, ..Default::default() },
            ..small_config()
        };
        let (out, log) = train(&cfg, &net).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(out.trainable_vector(), net.trainable_vector());
    }

    #[test]
    fn constant_reward_skips_every_update() {
        let net = random_net(5);
        let cfg = TrainConfig { oracle: RewardOracle::Constant(0.25), ..small_config() };
        let (out, log) = train(&cfg, &net).unwrap();
        assert_eq!(log.len(), 4);
        assert!(log.iter().all(|r| r.skipped));
        assert_eq!(out, net);
    }

    #[test]
    fn execution_mode_does_not_change_results() {
        let net = random_net(6);
        let seq = train(&TrainConfig { execution: Execution::Sequential, ..small_config() }, &net).unwrap();
        let par = train(&TrainConfig { execution: Execution::Parallel, ..small_config() }, &net).unwrap();
        assert_eq!(seq.0, par.0);
        assert_eq!(seq.1, par.1);
        assert!(seq.1.iter().any(|r| !r.skipped));
        assert_ne!(seq.0, net);
    }

    #[test]
    fn adapters_keep_base_weights() {
        let mut net = random_net(7);
        net.enable_adapters(2, &mut rng::master(1)).unwrap();
        let base = net.base_vector();
        let (out, _) = train(&small_config(), &net).unwrap();
        assert_eq!(out.base_vector(), base);
        assert_ne!(out.trainable_vector(), net.trainable_vector());
    }

    #[test]
    fn invalid_configs() {
        let net = random_net(8);
        for cfg in [
            TrainConfig { rounds: 0, ..small_config() },
            TrainConfig { group_size: 1, ..small_config() },
            TrainConfig { epochs: 0, ..small_config() },
            TrainConfig { conditions: vec![], ..small_config() },
            TrainConfig { schedule: ScheduleSpec { steps: 5, ..small_config().schedule }, ..small_config() },
        ] {
            assert!(train(&cfg, &net).is_err());
        }
    }

    #[test]
    fn reflect_sample_base_case_and_zero_net() {
        let s = sched();
        let g = GuidanceConfig::default();
        let net = random_net(9);
        let x = StateVector::new(vec![0.4, 1.1]);
        assert_eq!(
            reflect_sample(&net, &s, &x, Condition::Class(0), 0, &g).unwrap(),
            denoise(&net, &s, &x, Condition::Class(0), g.lambda_inference).unwrap()
        );
        let zero = DenoiserParams::zeros(NetworkSpec::new(2, 2, 8)).unwrap();
        for k in 0..4 {
            let out = reflect_sample(&zero, &s, &x, Condition::Class(0), k, &g).unwrap();
            assert!(out.dist_sq(&x.scaled(1.0 / s.alpha_bar(8).sqrt())).sqrt() < 1e-12);
        }
    }

    #[test]
    fn evaluation_flat_for_zero_net_and_deterministic() {
        let s = sched();
        let zero = DenoiserParams::zeros(NetworkSpec::new(2, 2, 8)).unwrap();
        let spec = EvalSpec {
            conditions: vec![Condition::Class(0)],
            rounds: 3,
            guidance: GuidanceConfig::default(),
            oracle: relational(),
            samples_per_condition: 16,
            seed: 4,
            execution: Execution::Parallel,
        };
        let means = evaluate_rounds(&zero, &s, &spec).unwrap();
        assert_eq!(means.len(), 4);
        assert!(means.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
        let one = EvalSpec { samples_per_condition: 1, ..spec.clone() };
        let net = random_net(10);
        assert_eq!(evaluate_rounds(&net, &s, &one).unwrap(), evaluate_rounds(&net, &s, &one).unwrap());
        assert!(evaluate_rounds(&net, &s, &EvalSpec { samples_per_condition: 0, ..spec }).is_err());
    }
}
