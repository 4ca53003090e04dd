//! Experiment plumbing shared by the command-line tool and the tests:
//! configuration, checkpoints, toy data, CSV/SVG output, and diagnostics.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diagnose;
pub mod output;
pub mod svg;

use std::fs;
use std::path::{Path, PathBuf};

use crate::denoiser::{pretrain, DenoiserParams, NoiseModel};
use crate::error::{Error, Result};
use crate::rng;
use crate::sampler::GuidanceConfig;
use crate::srrl::{evaluate_rounds, reflect_trace, train_with, MetricsRow};

pub use checkpoint::{Checkpoint, Provenance, FORMAT_VERSION};
pub use config::{ExperimentConfig, Task};
pub use diagnose::{run_diagnostics, Fault, Report};
pub use output::{MetricsWriter, SampleRecord, METRICS_HEADER};

pub const PRETRAINED_FILE: &str = "pretrained.json";
pub const TRAINED_FILE: &str = "trained.json";

/// Creates the output directory and writes the fully resolved config to it.
pub fn prepare_output(cfg: &ExperimentConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("resolved.cfg"), cfg.to_cfg_string())?;
    Ok(cfg.output_dir.clone())
}

fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<(Checkpoint, DenoiserParams)> {
    let ck = Checkpoint::load(path)?;
    if ck.schedule != cfg.schedule {
        return Err(Error::Invalid(format!(
            "checkpoint schedule {:?} differs from the configured {:?}",
            ck.schedule, cfg.schedule
        )));
    }
    let params = ck.params()?;
    if params.dim() != cfg.dim || params.spec().num_classes != cfg.conditions {
        return Err(Error::Invalid("checkpoint network does not match dim/conditions".into()));
    }
    Ok((ck, params))
}

/// Fits a fresh denoiser on the toy dataset. Returns the checkpoint path.
pub fn run_pretrain(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = prepare_output(cfg)?;
    let schedule = cfg.schedule.build()?;
    let data = dataset::generate_dataset(cfg, &mut rng::master(cfg.seed))?;
    let mut model = DenoiserParams::init(cfg.network_spec(), &mut rng::master(cfg.seed.wrapping_add(1)))?;
    let curve = pretrain(&mut model, &data, &schedule, &cfg.pretrain, cfg.seed.wrapping_add(2), cfg.execution)?;
    let mut loss = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        loss.push_str(&format!("{i},{l}\n"));
    }
    fs::write(out.join("pretrain_loss.csv"), loss)?;
    if !model.is_finite() || curve.iter().any(|l| !l.is_finite()) {
        return Err(Error::domain("pretraining diverged"));
    }
    let prov =
        Provenance { stage: "pretrain".into(), config_hash: cfg.config_hash(), seed: cfg.seed, rounds_completed: 0 };
    let path = out.join(PRETRAINED_FILE);
    Checkpoint::capture(&model, cfg.schedule, prov).save(&path)?;
    Ok(path)
}

/// Reflective RL fine-tuning from a checkpoint. Metrics stream to
/// `metrics.csv`; the result is written to `trained.json`.
pub fn run_train(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(PathBuf, Vec<MetricsRow>)> {
    let out = prepare_output(cfg)?;
    let (ck, mut model) = load_model(cfg, checkpoint)?;
    if cfg.adapter_enabled && !model.adapter_enabled() {
        model.enable_adapters(cfg.adapter_rank, &mut rng::master(cfg.seed.wrapping_add(3)))?;
    }
    let mut writer = MetricsWriter::create(&out.join("metrics.csv"))?;
    let (trained, rows) = train_with(&cfg.train_config(), &model, &mut |row| writer.write(row))?;
    if !trained.is_finite() {
        return Err(Error::domain("fine-tuning produced non-finite parameters"));
    }
    let prov = Provenance {
        stage: "train".into(),
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        rounds_completed: ck.provenance.rounds_completed + cfg.train_rounds,
    };
    let path = out.join(TRAINED_FILE);
    Checkpoint::capture(&trained, cfg.schedule, prov).save(&path)?;
    Ok((path, rows))
}

/// Reflective samples for every condition and round `0..=sample.rounds`,
/// written to `samples.csv` and `samples.svg`.
pub fn run_sample(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<SampleRecord>> {
    let out = prepare_output(cfg)?;
    let (_, model) = load_model(cfg, checkpoint)?;
    let schedule = cfg.schedule.build()?;
    let guidance: GuidanceConfig = cfg.guidance;
    let n = cfg.sample_count;
    let per_sample = crate::par::map_indexed(cfg.execution, cfg.conditions * n, |i| {
        let c = cfg.condition_list()[i / n];
        let x_t = rng::gaussian(&mut rng::stream(cfg.seed, i), cfg.dim);
        reflect_trace(&model, &schedule, &x_t, c, cfg.sample_rounds, &guidance).map(|trace| (c, i % n, trace))
    });
    let mut records = Vec::new();
    for item in per_sample {
        let (c, sample, trace) = item?;
        for (round, x) in trace.into_iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::domain("reflective sampling produced a non-finite state"));
            }
            records.push(SampleRecord { round, condition: c, sample, x });
        }
    }
    output::write_samples(&out.join("samples.csv"), &records)?;
    let line = (cfg.task == Task::Relational).then_some(svg::ConstraintLine {
        index_a: cfg.relational.index_a,
        index_b: cfg.relational.index_b,
        margin: cfg.relational.margin,
    });
    fs::write(out.join("samples.svg"), svg::scatter_svg(&records, line))?;
    Ok(records)
}

/// Mean reward per reflection round, written to `eval.csv`.
pub fn run_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<f64>> {
    let out = prepare_output(cfg)?;
    let (_, model) = load_model(cfg, checkpoint)?;
    let means = evaluate_rounds(&model, &cfg.schedule.build()?, &cfg.eval_spec())?;
    if means.iter().any(|m| !m.is_finite()) {
        return Err(Error::domain("evaluation produced non-finite rewards"));
    }
    output::write_eval(&out.join("eval.csv"), &means)?;
    Ok(means)
}

pub fn run_diagnose(cfg: &ExperimentConfig, fault: Option<Fault>) -> Result<Report> {
    let out = prepare_output(cfg)?;
    let report = run_diagnostics(cfg, fault)?;
    let text: String = report.checks.iter().map(|c| format!("{c}\n")).collect();
    fs::write(out.join("diagnose.txt"), text)?;
    Ok(report)
}
