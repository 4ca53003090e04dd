//! Numerical self-checks run by the `diagnose` subcommand.
//!
//! Each check compares an analytic quantity against an independent numerical
//! estimate. A fault can be injected on purpose to confirm that the checks
//! actually detect broken numerics.

use std::fmt;

use super::config::ExperimentConfig;
use crate::denoiser::{Condition, ConstantNoise, DenoiserParams, NoiseModel, StateVector};
use crate::error::Result;
use crate::rl::{normalize_advantages, ppo_gradient, ppo_objective};
use crate::rng;
use crate::sampler::{condition_guided_forward, gaussian_log_density, guidance_gap, sample_round};
use crate::stats::mean_std;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    FlipBackprop,
    SkewPpoGradient,
    ShiftInversion,
    OffsetGap,
    RawAdvantages,
    MisnormalizeDensity,
}

impl Fault {
    pub const ALL: [Fault; 6] = [
        Fault::FlipBackprop,
        Fault::SkewPpoGradient,
        Fault::ShiftInversion,
        Fault::OffsetGap,
        Fault::RawAdvantages,
        Fault::MisnormalizeDensity,
    ];

    pub fn from_seed(seed: u64) -> Self {
        Self::ALL[(seed % Self::ALL.len() as u64) as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:<22} {}", if self.passed { "ok  " } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub checks: Vec<CheckResult>,
    pub fault: Option<Fault>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Largest violation of `|a - b| <= atol + rtol |b|`, as a multiple of the
/// allowance.
fn worst_ratio(analytic: &[f64], numeric: &[f64], atol: f64, rtol: f64) -> f64 {
    analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs() / (atol + rtol * b.abs())).fold(0.0, f64::max)
}

fn central_difference(model: &DenoiserParams, h: f64, f: impl Fn(&DenoiserParams) -> f64) -> Vec<f64> {
    let base = model.trainable_vector();
    let mut probe = base.clone();
    let mut m = model.clone();
    (0..base.len())
        .map(|i| {
            probe[i] = base[i] + h;
            m.set_trainable_vector(&probe);
            let up = f(&m);
            probe[i] = base[i] - h;
            m.set_trainable_vector(&probe);
            let down = f(&m);
            probe[i] = base[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn diagnostic_net(cfg: &ExperimentConfig, adapters: bool) -> Result<DenoiserParams> {
    let mut r = rng::master(cfg.seed ^ 0x5eed);
    let mut spec = cfg.network_spec();
    // Small widths keep the full finite-difference sweep cheap.
    spec.hidden = vec![8; cfg.hidden_layers.min(2)];
    let mut p = DenoiserParams::init(spec, &mut r)?;
    p.randomize(&mut r, 0.4);
    if adapters {
        p.enable_adapters(cfg.adapter_rank.max(1), &mut r)?;
        p.randomize(&mut r, 0.4);
    }
    Ok(p)
}

fn check_backprop(cfg: &ExperimentConfig, fault: Option<Fault>) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for adapters in [false, true] {
        let net = diagnostic_net(cfg, adapters)?;
        let mut r = rng::master(cfg.seed.wrapping_add(1));
        let x = rng::gaussian(&mut r, cfg.dim);
        let up = rng::gaussian(&mut r, cfg.dim);
        let t = 1 + cfg.schedule.steps / 2;
        for c in [Condition::Class(cfg.conditions - 1), Condition::Null] {
            let mut analytic = net.backprop(&x, c, t, &up).as_slice().to_vec();
            if fault == Some(Fault::FlipBackprop) {
                analytic.iter_mut().for_each(|g| *g = -*g);
            }
            let numeric = central_difference(&net, 1e-6, |m| {
                m.predict_noise(&x, c, t).as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum()
            });
            worst = worst.max(worst_ratio(&analytic, &numeric, 1e-7, 1e-5));
        }
    }
    Ok(CheckResult { name: "backprop", passed: worst <= 1.0, detail: format!("worst error / tolerance = {worst:.3e}") })
}

fn check_ppo(cfg: &ExperimentConfig, fault: Option<Fault>) -> Result<CheckResult> {
    let schedule = cfg.schedule.build()?;
    let net = diagnostic_net(cfg, true)?;
    let mut r = rng::master(cfg.seed.wrapping_add(2));
    let x_t = rng::gaussian(&mut r, cfg.dim);
    let c = Condition::Class(0);
    let traj = sample_round(&net, &schedule, &x_t, c, cfg.guidance.lambda_denoise, 1.0, &mut r)?;
    // Move the policy a little so the ratios differ from one.
    let mut moved = net.clone();
    let shifted: Vec<f64> = moved.trainable_vector().iter().map(|v| v + 1e-3 * rng::gaussian(&mut r, 1)[0]).collect();
    moved.set_trainable_vector(&shifted);
    let (adv, clip) = (0.7, 0.9);
    let mut analytic = ppo_gradient(&traj, &moved, &schedule, adv, clip)?.as_slice().to_vec();
    if fault == Some(Fault::SkewPpoGradient) {
        analytic.iter_mut().for_each(|g| *g *= 1.1);
    }
    let numeric = central_difference(&moved, 1e-6, |m| {
        ppo_objective(&traj, m, &schedule, adv, clip).map(|v| v.objective).unwrap_or(f64::NAN)
    });
    let worst = worst_ratio(&analytic, &numeric, 1e-6, 1e-4);
    Ok(CheckResult {
        name: "ppo_gradient",
        passed: worst <= 1.0,
        detail: format!("worst error / tolerance = {worst:.3e}"),
    })
}

fn constant_model(cfg: &ExperimentConfig) -> ConstantNoise {
    let mut r = rng::master(cfg.seed.wrapping_add(3));
    ConstantNoise {
        conditional: rng::gaussian(&mut r, cfg.dim),
        unconditional: rng::gaussian(&mut r, cfg.dim),
        num_steps: cfg.schedule.steps,
    }
}

/// With a constant predictor the inversion telescopes to the forward marginal
/// `sqrt(ab_T) x0 + sqrt(1 - ab_T) eps`.
fn check_inversion(cfg: &ExperimentConfig, fault: Option<Fault>) -> Result<CheckResult> {
    let schedule = cfg.schedule.build()?;
    let model = constant_model(cfg);
    let c = Condition::Class(0);
    let lambda = cfg.guidance.lambda_forward;
    let x0 = rng::gaussian(&mut rng::master(cfg.seed.wrapping_add(4)), cfg.dim);
    let mut got = condition_guided_forward(&model, &schedule, &x0, c, lambda)?;
    if fault == Some(Fault::ShiftInversion) {
        got = got.add_scaled(&StateVector::new(vec![1.0; cfg.dim]), 1e-6);
    }
    let eps = model.conditional.scaled(1.0 + lambda).add_scaled(&model.unconditional, -lambda);
    let want = schedule.q_sample(&x0, schedule.num_steps(), &eps)?;
    let err = got.dist_sq(&want).sqrt();
    Ok(CheckResult { name: "inversion", passed: err < 1e-9, detail: format!("distance to closed form = {err:.3e}") })
}

fn check_gap(cfg: &ExperimentConfig, fault: Option<Fault>) -> Result<CheckResult> {
    let schedule = cfg.schedule.build()?;
    let model = constant_model(cfg);
    let c = Condition::Class(0);
    let x0 = rng::gaussian(&mut rng::master(cfg.seed.wrapping_add(5)), cfg.dim);
    let base = cfg.guidance.lambda_denoise;
    let offset = if fault == Some(Fault::OffsetGap) { 0.1 } else { 0.0 };
    let zero = guidance_gap(&model, &schedule, &x0, c, base + offset, base)?;
    let gaps: Vec<f64> = [0.5, 1.0, 2.0, 4.0]
        .iter()
        .map(|d| guidance_gap(&model, &schedule, &x0, c, base + d, base))
        .collect::<Result<_>>()?;
    let monotone = gaps.windows(2).all(|w| w[1] > w[0]);
    Ok(CheckResult {
        name: "guidance_gap",
        passed: zero < 1e-20 && monotone,
        detail: format!("gap at equal scales = {zero:.3e}, increasing = {monotone}"),
    })
}

fn check_advantages(cfg: &ExperimentConfig, fault: Option<Fault>) -> Result<CheckResult> {
    let mut r = rng::master(cfg.seed.wrapping_add(6));
    let rewards: Vec<f64> = (0..cfg.group_size).map(|_| 3.0 + 2.0 * rng::gaussian(&mut r, 1)[0]).collect();
    let adv =
        if fault == Some(Fault::RawAdvantages) { rewards.clone() } else { normalize_advantages(&rewards)?.advantages };
    let (m, s) = mean_std(&adv);
    Ok(CheckResult {
        name: "advantages",
        passed: m.abs() < 1e-12 && (s - 1.0).abs() < 1e-12,
        detail: format!("mean = {m:.3e}, std = {s:.12}"),
    })
}

/// Simpson integration of a one-dimensional step density over +-12 sigma.
fn check_density(_cfg: &ExperimentConfig, fault: Option<Fault>) -> Result<CheckResult> {
    let (mu, sigma) = (0.3, 0.17);
    let shift = if fault == Some(Fault::MisnormalizeDensity) { 0.01f64.ln_1p() } else { 0.0 };
    let n = 4000;
    let (a, b) = (mu - 12.0 * sigma, mu + 12.0 * sigma);
    let h = (b - a) / n as f64;
    let f =
        |x: f64| (gaussian_log_density(&StateVector::new(vec![x]), &StateVector::new(vec![mu]), sigma) + shift).exp();
    let mut total = f(a) + f(b);
    for i in 1..n {
        total += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    let integral = total * h / 3.0;
    Ok(CheckResult {
        name: "density",
        passed: (integral - 1.0).abs() <= 1e-3,
        detail: format!("integral = {integral:.9}"),
    })
}

pub fn run_diagnostics(cfg: &ExperimentConfig, fault: Option<Fault>) -> Result<Report> {
    let checks = vec![
        check_backprop(cfg, fault)?,
        check_ppo(cfg, fault)?,
        check_inversion(cfg, fault)?,
        check_gap(cfg, fault)?,
        check_advantages(cfg, fault)?,
        check_density(cfg, fault)?,
    ];
    Ok(Report { checks, fault })
}
