use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{adam_update, Condition, NoiseModel, OptimizerConfig, OptimizerState, ParamGradients, StateVector};
use crate::error::{check_dim, Error, Result};
use crate::par::{map_indexed, Execution};
use crate::rng::{self, SimRng};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub cond_dropout: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 128,
            cond_dropout: 0.1,
            optimizer: OptimizerConfig { lr: 2e-3, weight_decay: 0.0, ..OptimizerConfig::default() },
        }
    }
}

/// One epsilon-matching update on `batch`. Each sample gets a uniform
/// timestep, fresh Gaussian noise, and has its condition replaced by
/// [`Condition::Null`] with probability `cond_dropout`. Returns the batch mean
/// squared error before the update.
pub fn pretrain_step<M: NoiseModel>(
    model: &mut M,
    opt: &mut OptimizerState,
    batch: &[(StateVector, Condition)],
    schedule: &NoiseSchedule,
    cond_dropout: f64,
    rng: &mut SimRng,
    exec: Execution,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(0.0..=1.0).contains(&cond_dropout) {
        return Err(Error::domain(format!("cond_dropout {cond_dropout} outside [0, 1]")));
    }
    let dim = model.dim();
    for (x0, _) in batch {
        check_dim(dim, x0.dim())?;
    }
    let draws: Vec<(usize, StateVector, Condition)> = batch
        .iter()
        .map(|(_, c)| {
            let t = rng.random_range(1..=schedule.num_steps());
            let noise = rng::gaussian(rng, dim);
            let c = if rng.random::<f64>() < cond_dropout { Condition::Null } else { *c };
            (t, noise, c)
        })
        .collect();

    let norm = 1.0 / (batch.len() * dim) as f64;
    let shared: &M = model;
    let per_sample = map_indexed(exec, batch.len(), |i| {
        let (t, noise, c) = &draws[i];
        let xt = schedule.q_sample(&batch[i].0, *t, noise).expect("validated above");
        let resid = shared.predict_noise(&xt, *c, *t).sub(noise);
        let loss = resid.norm_sq() * norm;
        let grad = shared.backprop(&xt, *c, *t, &resid.scaled(2.0 * norm));
        (loss, grad)
    });

    let mut total = 0.0;
    let mut grads = ParamGradients::zeros(model.num_trainable());
    for (loss, g) in &per_sample {
        total += loss;
        grads.axpy(1.0, g);
    }
    adam_update(model, opt, &grads)?;
    Ok(total)
}

/// Runs `config.steps` updates on minibatches drawn uniformly with
/// replacement from `dataset`. Returns the per-step loss curve.
pub fn pretrain<M: NoiseModel>(
    model: &mut M,
    dataset: &[(StateVector, Condition)],
    schedule: &NoiseSchedule,
    config: &PretrainConfig,
    seed: u64,
    exec: Execution,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = rng::master(seed);
    let mut opt = OptimizerState::new(model, config.optimizer);
    let mut curve = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let batch: Vec<_> =
            (0..config.batch_size).map(|_| dataset[rng.random_range(0..dataset.len())].clone()).collect();
        curve.push(pretrain_step(model, &mut opt, &batch, schedule, config.cond_dropout, &mut rng, exec)?);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserParams, NetworkSpec, TensorSlot};
    use crate::schedule::ScheduleSpec;

    /// The Bayes-optimal predictor for x0 ~ N(0, s^2): E[eps | x_t] = k_t x_t.
    struct GaussianOptimum {
        schedule: NoiseSchedule,
        data_var: f64,
    }

    impl NoiseModel for GaussianOptimum {
        fn dim(&self) -> usize {
            1
        }
        fn num_steps(&self) -> usize {
            self.schedule.num_steps()
        }
        fn predict_noise(&self, x: &StateVector, _: Condition, t: usize) -> StateVector {
            let ab = self.schedule.alpha_bar(t);
            let k = (1.0 - ab).sqrt() / (ab * self.data_var + 1.0 - ab);
            x.scaled(k)
        }
        fn backprop(&self, _: &StateVector, _: Condition, _: usize, _: &StateVector) -> ParamGradients {
            ParamGradients::zeros(0)
        }
        fn trainable_layout(&self) -> Vec<TensorSlot> {
            Vec::new()
        }
        fn visit_trainable(&self, _: &mut dyn FnMut(&[f64])) {}
        fn visit_trainable_mut(&mut self, _: &mut dyn FnMut(&mut [f64])) {}
    }

    #[test]
    fn optimal_linear_predictor_hits_analytic_floor() {
        let schedule = ScheduleSpec { steps: 10, beta_start: 0.01, beta_end: 0.3 }.build().unwrap();
        let data_var: f64 = 2.25;
        // Floor per timestep: Var(eps | x_t) = ab s^2 / (ab s^2 + 1 - ab).
        let floor: f64 = (1..=10)
            .map(|t| {
                let ab = schedule.alpha_bar(t);
                ab * data_var / (ab * data_var + 1.0 - ab)
            })
            .sum::<f64>()
            / 10.0;
        let mut model = GaussianOptimum { schedule: schedule.clone(), data_var };
        let mut opt = OptimizerState::new(&model, OptimizerConfig::default());
        let mut r = rng::master(11);
        let batch: Vec<_> =
            (0..200_000).map(|_| (rng::gaussian(&mut r, 1).scaled(data_var.sqrt()), Condition::Class(0))).collect();
        let loss = pretrain_step(&mut model, &mut opt, &batch, &schedule, 0.0, &mut r, Execution::Parallel).unwrap();
        // Per-sample loss is floor_t * chi2(1); sd of the mean is below 0.004 here.
        assert!((loss - floor).abs() < 0.012, "loss {loss} vs floor {floor}");
    }

    fn toy_model(seed: u64) -> DenoiserParams {
        let spec = NetworkSpec { dim: 2, num_classes: 2, num_steps: 10, time_embed_width: 4, hidden: vec![16, 16] };
        DenoiserParams::init(spec, &mut rng::master(seed)).unwrap()
    }

    fn toy_data() -> Vec<(StateVector, Condition)> {
        let mut r = rng::master(5);
        (0..256)
            .map(|i| {
                let c = i % 2;
                let shift = if c == 0 { 2.0 } else { -2.0 };
                (
                    rng::gaussian(&mut r, 2).scaled(0.3).add_scaled(&StateVector::new(vec![shift, 0.0]), 1.0),
                    Condition::Class(c),
                )
            })
            .collect()
    }

    #[test]
    fn zero_lr_leaves_params() {
        let schedule = ScheduleSpec { steps: 10, beta_start: 0.01, beta_end: 0.3 }.build().unwrap();
        let mut model = toy_model(1);
        let before = model.clone();
        let mut opt = OptimizerState::new(&model, OptimizerConfig { lr: 0.0, ..Default::default() });
        let loss = pretrain_step(
            &mut model,
            &mut opt,
            &toy_data(),
            &schedule,
            0.1,
            &mut rng::master(0),
            Execution::Sequential,
        )
        .unwrap();
        assert!(loss.is_finite());
        assert_eq!(model, before);
    }

    #[test]
    fn empty_batch_rejected() {
        let schedule = ScheduleSpec::default().build().unwrap();
        let mut model = toy_model(1);
        let mut opt = OptimizerState::new(&model, OptimizerConfig::default());
        let err = pretrain_step(&mut model, &mut opt, &[], &schedule, 0.1, &mut rng::master(0), Execution::Sequential);
        assert!(matches!(err, Err(Error::EmptyBatch)));
    }

    #[test]
    fn full_dropout_makes_branches_coincide() {
        let schedule = ScheduleSpec { steps: 10, beta_start: 0.01, beta_end: 0.3 }.build().unwrap();
        let mut model = toy_model(2);
        let cfg = PretrainConfig { steps: 200, batch_size: 32, cond_dropout: 1.0, ..Default::default() };
        pretrain(&mut model, &toy_data(), &schedule, &cfg, 3, Execution::Parallel).unwrap();
        let mut r = rng::master(77);
        for _ in 0..20 {
            let x = rng::gaussian(&mut r, 2);
            let t = r.random_range(1..=10);
            let a = model.predict_noise(&x, Condition::Class(1), t);
            let b = model.predict_noise(&x, Condition::Null, t);
            assert!(a.dist_sq(&b).sqrt() < 1e-12);
        }
    }

    #[test]
    fn loss_curve_reproducible_and_decreasing() {
        let schedule = ScheduleSpec { steps: 10, beta_start: 0.01, beta_end: 0.3 }.build().unwrap();
        let cfg = PretrainConfig { steps: 300, batch_size: 64, ..Default::default() };
        let run = |exec| {
            let mut model = toy_model(4);
            pretrain(&mut model, &toy_data(), &schedule, &cfg, 8, exec).unwrap()
        };
        let a = run(Execution::Parallel);
        let b = run(Execution::Sequential);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let head: f64 = a[..30].iter().sum::<f64>() / 30.0;
        let tail: f64 = a[270..].iter().sum::<f64>() / 30.0;
        assert!(tail < head, "{tail} !< {head}");
    }
}
