//! Experiment configuration files.
//!
//! The format is flat UTF-8 text: one `key = value` per line, `#` starts a
//! comment, and dotted keys express nesting (`guidance.lambda_forward = 0.5`).
//! Every key has a default; unknown keys are rejected with their line number.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::denoiser::{Condition, DenoiserParams, NetworkSpec, OptimizerConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::rl::{RewardMode, RewardOracle};
use crate::sampler::GuidanceConfig;
use crate::schedule::ScheduleSpec;
use crate::srrl::{EvalSpec, TrainConfig};

/// Line number used for values supplied on the command line.
pub const OVERRIDE_LINE: usize = 0;

#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, (usize, String)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let content = strip_comment(line).trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line: lineno,
                message: format!("expected `key = value`, got `{content}`"),
            })?;
            let key = key.trim();
            if key.is_empty() || !key.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '.') {
                return Err(Error::Config { line: lineno, message: format!("invalid key `{key}`") });
            }
            if raw.entries.insert(key.to_string(), (lineno, value.trim().to_string())).is_some() {
                return Err(Error::Config { line: lineno, message: format!("duplicate key `{key}`") });
            }
        }
        Ok(raw)
    }

    /// Applies a `key=value` override, replacing any value from the file.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| Error::Config {
            line: OVERRIDE_LINE,
            message: format!("override `{assignment}` is not key=value"),
        })?;
        self.entries.insert(k.trim().to_string(), (OVERRIDE_LINE, v.trim().to_string()));
        Ok(())
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

/// Typed access with line-numbered errors; tracks which keys were consumed.
struct Reader {
    entries: BTreeMap<String, (usize, String)>,
}

impl Reader {
    fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some((line, v)) => {
                v.parse().map_err(|_| Error::Config { line, message: format!("invalid value `{v}` for `{key}`") })
            }
        }
    }

    fn take_list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| Error::Config { line, message: format!("invalid number list `{v}` for `{key}`") }),
        }
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map(|(l, _)| *l).unwrap_or(OVERRIDE_LINE)
    }

    fn finish(self) -> Result<()> {
        if let Some((key, (line, _))) = self.entries.into_iter().min_by_key(|(_, (l, _))| *l) {
            return Err(Error::Config { line, message: format!("unknown key `{key}`") });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Modes,
    Relational,
}

impl FromStr for Task {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "modes" => Ok(Task::Modes),
            "relational" => Ok(Task::Relational),
            _ => Err(()),
        }
    }
}

impl Task {
    fn name(&self) -> &'static str {
        match self {
            Task::Modes => "modes",
            Task::Relational => "relational",
        }
    }
}

fn parse_execution(s: &str) -> std::result::Result<Execution, ()> {
    match s {
        "parallel" => Ok(Execution::Parallel),
        "sequential" => Ok(Execution::Sequential),
        _ => Err(()),
    }
}

/// Isotropic Gaussian component of the toy data distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMode {
    pub mean: Vec<f64>,
    pub std: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Relational {
    pub index_a: usize,
    pub index_b: usize,
    pub margin: f64,
    pub sharpness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RewardKind {
    /// The task's own oracle (mode affinity or relational constraint).
    Task,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,
    pub dim: usize,
    pub conditions: usize,
    pub output_dir: PathBuf,
    pub execution: Execution,
    pub schedule: ScheduleSpec,
    pub time_embed_width: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub adapter_enabled: bool,
    pub adapter_rank: usize,
    pub dataset_size: usize,
    pub modes: BTreeMap<usize, Vec<DataMode>>,
    pub relational: Relational,
    pub reward: RewardKind,
    pub pretrain: PretrainConfig,
    pub train_rounds: usize,
    pub group_size: usize,
    pub epochs: usize,
    pub eta_final: f64,
    pub clip_eps: f64,
    pub optimizer: OptimizerConfig,
    pub guidance: GuidanceConfig,
    pub eval_samples: usize,
    pub eval_rounds: usize,
    pub sample_rounds: usize,
    pub sample_count: usize,
}

fn default_modes(dim: usize, conditions: usize) -> BTreeMap<usize, Vec<DataMode>> {
    (0..conditions)
        .map(|c| {
            let mut mean = vec![0.0; dim];
            if dim == 1 {
                mean[0] = 3.0 * (c as f64 - (conditions as f64 - 1.0) / 2.0);
            } else {
                let angle = 2.0 * PI * c as f64 / conditions as f64;
                mean[0] = 2.5 * angle.cos();
                mean[1] = 2.5 * angle.sin();
            }
            (c, vec![DataMode { mean, std: 0.5, weight: 1.0 }])
        })
        .collect()
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Invalid(format!("cannot read config {}: {e}", path.display())))?;
        let mut raw = RawConfig::parse(&text)?;
        for o in overrides {
            raw.set(o)?;
        }
        Self::from_raw(raw)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_raw(RawConfig::parse(text)?)
    }

    pub fn from_raw(raw: RawConfig) -> Result<Self> {
        let mut r = Reader { entries: raw.entries };
        let task: Task = r.take("task", Task::Relational)?;
        let default_conditions = if task == Task::Modes { 2 } else { 1 };
        let dim: usize = r.take("dim", 2)?;
        let conditions_line = r.line_of("conditions");
        let conditions: usize = r.take("conditions", default_conditions)?;
        if conditions == 0 {
            return Err(Error::Config { line: conditions_line, message: "`conditions` must be at least 1".into() });
        }
        let d = ScheduleSpec::default();
        let p = PretrainConfig::default();
        let o = OptimizerConfig::default();
        let g = GuidanceConfig::default();

        let execution = match r.entries.remove("execution") {
            None => Execution::default(),
            Some((line, v)) => parse_execution(&v)
                .map_err(|_| Error::Config { line, message: format!("invalid value `{v}` for `execution`") })?,
        };

        let mut modes: BTreeMap<usize, Vec<DataMode>> = BTreeMap::new();
        let mode_keys: Vec<String> = r.entries.keys().filter(|k| k.starts_with("modes.")).cloned().collect();
        let mut mode_ids = std::collections::BTreeSet::new();
        for key in &mode_keys {
            let line = r.line_of(key);
            let parts: Vec<&str> = key.split('.').collect();
            let bad = || Error::Config {
                line,
                message: format!("mode keys look like modes.<condition>.<index>.mean, got `{key}`"),
            };
            if parts.len() != 4 || !["mean", "std", "weight"].contains(&parts[3]) {
                return Err(bad());
            }
            let c: usize = parts[1].parse().map_err(|_| bad())?;
            let j: usize = parts[2].parse().map_err(|_| bad())?;
            if c >= conditions {
                return Err(Error::Config { line, message: format!("mode for undefined condition {c}") });
            }
            mode_ids.insert((c, j));
        }
        for (c, j) in mode_ids {
            let prefix = format!("modes.{c}.{j}");
            let line = r.line_of(&format!("{prefix}.std"));
            let mean = r
                .take_list(&format!("{prefix}.mean"))?
                .ok_or_else(|| Error::Config { line, message: format!("`{prefix}.mean` is required") })?;
            let std = r.take(&format!("{prefix}.std"), 0.5)?;
            let weight = r.take(&format!("{prefix}.weight"), 1.0)?;
            modes.entry(c).or_default().push(DataMode { mean, std, weight });
        }
        if modes.is_empty() {
            modes = default_modes(dim, conditions);
        }

        let reward_line = r.line_of("reward.kind");
        let reward_kind: String = r.take("reward.kind", "task".to_string())?;
        let constant: f64 = r.take("reward.constant", 0.0)?;
        let reward = match reward_kind.as_str() {
            "task" => RewardKind::Task,
            "constant" => RewardKind::Constant(constant),
            other => {
                return Err(Error::Config { line: reward_line, message: format!("unknown reward.kind `{other}`") })
            }
        };

        let cfg = ExperimentConfig {
            task,
            seed: r.take("seed", 0)?,
            dim,
            conditions,
            output_dir: PathBuf::from(r.take("output_dir", "out".to_string())?),
            execution,
            schedule: ScheduleSpec {
                steps: r.take("schedule.steps", d.steps)?,
                beta_start: r.take("schedule.beta_start", d.beta_start)?,
                beta_end: r.take("schedule.beta_end", d.beta_end)?,
            },
            time_embed_width: r.take("model.time_embed_width", 8)?,
            hidden_width: r.take("model.hidden_width", 64)?,
            hidden_layers: r.take("model.hidden_layers", 2)?,
            adapter_enabled: r.take("model.adapter.enabled", true)?,
            adapter_rank: r.take("model.adapter.rank", 4)?,
            dataset_size: r.take("dataset.size", 4096)?,
            modes,
            relational: Relational {
                index_a: r.take("relational.index_a", 0)?,
                index_b: r.take("relational.index_b", 1)?,
                margin: r.take("relational.margin", 1.0)?,
                sharpness: r.take("relational.sharpness", 4.0)?,
            },
            reward,
            pretrain: PretrainConfig {
                steps: r.take("pretrain.steps", p.steps)?,
                batch_size: r.take("pretrain.batch_size", p.batch_size)?,
                cond_dropout: r.take("pretrain.cond_dropout", p.cond_dropout)?,
                optimizer: OptimizerConfig {
                    lr: r.take("pretrain.lr", p.optimizer.lr)?,
                    beta1: p.optimizer.beta1,
                    beta2: p.optimizer.beta2,
                    weight_decay: r.take("pretrain.weight_decay", p.optimizer.weight_decay)?,
                    eps: p.optimizer.eps,
                },
            },
            train_rounds: r.take("train.rounds", 10)?,
            group_size: r.take("train.group_size", 32)?,
            epochs: r.take("train.epochs", 2)?,
            eta_final: r.take("train.eta_final", 1.0)?,
            clip_eps: r.take("train.clip_eps", 0.2)?,
            optimizer: OptimizerConfig {
                lr: r.take("train.lr", o.lr)?,
                beta1: r.take("train.beta1", o.beta1)?,
                beta2: r.take("train.beta2", o.beta2)?,
                weight_decay: r.take("train.weight_decay", o.weight_decay)?,
                eps: r.take("train.eps", o.eps)?,
            },
            guidance: GuidanceConfig {
                lambda_denoise: r.take("guidance.lambda_denoise", g.lambda_denoise)?,
                lambda_forward: r.take("guidance.lambda_forward", g.lambda_forward)?,
                lambda_inference: r.take("guidance.lambda_inference", g.lambda_inference)?,
            },
            eval_samples: r.take("eval.samples", 64)?,
            eval_rounds: r.take("eval.rounds", 10)?,
            sample_rounds: r.take("sample.rounds", 5)?,
            sample_count: r.take("sample.count", 200)?,
        };
        r.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.dim == 0 {
            return bad("dim must be at least 1".into());
        }
        if self.conditions == 0 {
            return bad("conditions must be at least 1".into());
        }
        for c in 0..self.conditions {
            let Some(list) = self.modes.get(&c) else {
                if self.task == Task::Modes {
                    return bad(format!("condition {c} has no modes"));
                }
                continue;
            };
            for m in list {
                if m.mean.len() != self.dim {
                    return bad(format!("mode of condition {c} has {} coordinates, dim is {}", m.mean.len(), self.dim));
                }
                if !(m.std > 0.0 && m.weight > 0.0) {
                    return bad(format!("mode of condition {c} needs positive std and weight"));
                }
            }
        }
        if self.task == Task::Relational {
            let rel = self.relational;
            if rel.index_a.max(rel.index_b) >= self.dim {
                return bad("relational indices exceed dim".into());
            }
        }
        if self.adapter_enabled && self.adapter_rank == 0 {
            return bad("model.adapter.rank must be positive".into());
        }
        if self.dataset_size == 0 || self.pretrain.batch_size == 0 {
            return bad("dataset.size and pretrain.batch_size must be positive".into());
        }
        self.schedule.build()?;
        DenoiserParams::zeros(self.network_spec())?;
        self.train_config().validate()
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            dim: self.dim,
            num_classes: self.conditions,
            num_steps: self.schedule.steps,
            time_embed_width: self.time_embed_width,
            hidden: vec![self.hidden_width; self.hidden_layers],
        }
    }

    pub fn condition_list(&self) -> Vec<Condition> {
        (0..self.conditions).map(Condition::Class).collect()
    }

    pub fn oracle(&self) -> RewardOracle {
        match (self.reward, self.task) {
            (RewardKind::Constant(v), _) => RewardOracle::Constant(v),
            (RewardKind::Task, Task::Relational) => RewardOracle::RelationalConstraint {
                index_a: self.relational.index_a,
                index_b: self.relational.index_b,
                margin: self.relational.margin,
                sharpness: self.relational.sharpness,
            },
            (RewardKind::Task, Task::Modes) => RewardOracle::ModeAffinity {
                targets: self
                    .modes
                    .iter()
                    .map(|(c, list)| {
                        (*c, list.iter().map(|m| RewardMode { mean: m.mean.clone(), weight: m.weight }).collect())
                    })
                    .collect(),
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            rounds: self.train_rounds,
            schedule: self.schedule,
            group_size: self.group_size,
            epochs: self.epochs,
            guidance: self.guidance,
            eta_final: self.eta_final,
            clip_eps: self.clip_eps,
            optimizer: self.optimizer,
            seed: self.seed,
            conditions: self.condition_list(),
            oracle: self.oracle(),
            execution: self.execution,
        }
    }

    pub fn eval_spec(&self) -> EvalSpec {
        EvalSpec {
            conditions: self.condition_list(),
            rounds: self.eval_rounds,
            guidance: self.guidance,
            oracle: self.oracle(),
            samples_per_condition: self.eval_samples,
            seed: self.seed,
            execution: self.execution,
        }
    }

    /// Every setting with defaults expanded, in a fixed order. Parsing this
    /// text yields an identical configuration.
    pub fn to_cfg_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("task", self.task.name().into());
        kv("seed", self.seed.to_string());
        kv("dim", self.dim.to_string());
        kv("conditions", self.conditions.to_string());
        kv("output_dir", self.output_dir.display().to_string());
        kv(
            "execution",
            match self.execution {
                Execution::Parallel => "parallel".into(),
                Execution::Sequential => "sequential".into(),
            },
        );
        kv("schedule.steps", self.schedule.steps.to_string());
        kv("schedule.beta_start", self.schedule.beta_start.to_string());
        kv("schedule.beta_end", self.schedule.beta_end.to_string());
        kv("model.time_embed_width", self.time_embed_width.to_string());
        kv("model.hidden_width", self.hidden_width.to_string());
        kv("model.hidden_layers", self.hidden_layers.to_string());
        kv("model.adapter.enabled", self.adapter_enabled.to_string());
        kv("model.adapter.rank", self.adapter_rank.to_string());
        kv("dataset.size", self.dataset_size.to_string());
        for (c, list) in &self.modes {
            for (j, m) in list.iter().enumerate() {
                let mean: Vec<String> = m.mean.iter().map(|v| v.to_string()).collect();
                kv(&format!("modes.{c}.{j}.mean"), mean.join(", "));
                kv(&format!("modes.{c}.{j}.std"), m.std.to_string());
                kv(&format!("modes.{c}.{j}.weight"), m.weight.to_string());
            }
        }
        kv("relational.index_a", self.relational.index_a.to_string());
        kv("relational.index_b", self.relational.index_b.to_string());
        kv("relational.margin", self.relational.margin.to_string());
        kv("relational.sharpness", self.relational.sharpness.to_string());
        match self.reward {
            RewardKind::Task => {
                kv("reward.kind", "task".into());
                kv("reward.constant", "0".into());
            }
            RewardKind::Constant(v) => {
                kv("reward.kind", "constant".into());
                kv("reward.constant", v.to_string());
            }
        }
        kv("pretrain.steps", self.pretrain.steps.to_string());
        kv("pretrain.batch_size", self.pretrain.batch_size.to_string());
        kv("pretrain.cond_dropout", self.pretrain.cond_dropout.to_string());
        kv("pretrain.lr", self.pretrain.optimizer.lr.to_string());
        kv("pretrain.weight_decay", self.pretrain.optimizer.weight_decay.to_string());
        kv("train.rounds", self.train_rounds.to_string());
        kv("train.group_size", self.group_size.to_string());
        kv("train.epochs", self.epochs.to_string());
        kv("train.eta_final", self.eta_final.to_string());
        kv("train.clip_eps", self.clip_eps.to_string());
        kv("train.lr", self.optimizer.lr.to_string());
        kv("train.beta1", self.optimizer.beta1.to_string());
        kv("train.beta2", self.optimizer.beta2.to_string());
        kv("train.weight_decay", self.optimizer.weight_decay.to_string());
        kv("train.eps", self.optimizer.eps.to_string());
        kv("guidance.lambda_denoise", self.guidance.lambda_denoise.to_string());
        kv("guidance.lambda_forward", self.guidance.lambda_forward.to_string());
        kv("guidance.lambda_inference", self.guidance.lambda_inference.to_string());
        kv("eval.samples", self.eval_samples.to_string());
        kv("eval.rounds", self.eval_rounds.to_string());
        kv("sample.rounds", self.sample_rounds.to_string());
        kv("sample.count", self.sample_count.to_string());
        s
    }

    /// SHA-256 of the resolved configuration text.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.to_cfg_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg.task, Task::Relational);
        assert_eq!(cfg.train_rounds, 10);
        assert_eq!(cfg.group_size, 32);
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.schedule.steps, 20);
        assert_eq!(cfg.guidance, GuidanceConfig::default());
        assert_eq!(cfg.optimizer.lr, 1e-4);
        assert_eq!(cfg.adapter_rank, 4);
    }

    #[test]
    fn comments_and_dotted_keys() {
        let text = "# experiment\ntask = modes   # two blobs\n\nguidance.lambda_forward = 1.25\nmodes.0.0.mean = 1, 2\nmodes.1.0.mean = -1, 0\nmodes.1.0.std = 0.2\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.task, Task::Modes);
        assert_eq!(cfg.guidance.lambda_forward, 1.25);
        assert_eq!(cfg.modes[&0][0].mean, vec![1.0, 2.0]);
        assert_eq!(cfg.modes[&1][0].std, 0.2);
    }

    #[test]
    fn resolved_text_round_trips() {
        let cfg = ExperimentConfig::parse("task = modes\nconditions = 3\nseed = 17\ntrain.lr = 0.003").unwrap();
        let again = ExperimentConfig::parse(&cfg.to_cfg_string()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.config_hash(), again.config_hash());
        assert_eq!(cfg.config_hash().len(), 64);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = |text: &str| match ExperimentConfig::parse(text) {
            Err(Error::Config { line, .. }) => line,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(err("seed = 1\nnot a pair\n"), 2);
        assert_eq!(err("seed = 1\n\ntrain.rounds = many\n"), 3);
        assert_eq!(err("seed = 1\nbogus.key = 3\n"), 2);
        assert_eq!(err("seed = 1\nseed = 2\n"), 2);
        assert_eq!(err("conditions = 0\n"), 1);
        assert_eq!(err("task = images\n"), 1);
    }

    #[test]
    fn semantic_validation() {
        assert!(ExperimentConfig::parse("train.group_size = 1").is_err());
        assert!(ExperimentConfig::parse("relational.index_b = 5").is_err());
        assert!(ExperimentConfig::parse("task = modes\nmodes.0.0.mean = 1, 2, 3").is_err());
        assert!(ExperimentConfig::parse("task = modes\nconditions = 2\nmodes.0.0.mean = 1, 2").is_err());
    }

    #[test]
    fn overrides_replace_values() {
        let mut raw = RawConfig::parse("seed = 1\n").unwrap();
        raw.set("seed=9").unwrap();
        raw.set("train.rounds = 3").unwrap();
        let cfg = ExperimentConfig::from_raw(raw).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train_rounds, 3);
    }

    #[test]
    fn constant_reward_oracle() {
        let cfg = ExperimentConfig::parse("reward.kind = constant\nreward.constant = 0.5").unwrap();
        assert_eq!(cfg.oracle(), RewardOracle::Constant(0.5));
    }
}
