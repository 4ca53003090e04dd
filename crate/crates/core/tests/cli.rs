//! Command-line behaviour: outputs, exit codes, and reproducibility.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use srrl::harness::METRICS_HEADER;

const SMOKE: &str = "\
task = relational
dim = 2
schedule.steps = 6
model.hidden_width = 8
model.hidden_layers = 1
dataset.size = 128
pretrain.steps = 20
pretrain.batch_size = 16
train.rounds = 1
train.epochs = 1
train.group_size = 2
eval.rounds = 2
eval.samples = 4
sample.rounds = 2
sample.count = 3
";

fn srrl(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("smoke.cfg");
    if !cfg.exists() {
        std::fs::write(&cfg, SMOKE).unwrap();
    }
    let out = format!("output_dir={}", dir.join("out").display());
    Command::new(env!("CARGO_BIN_EXE_srrl"))
        .args(args)
        .args(["--config", cfg.to_str().unwrap(), "--set", &out])
        .output()
        .unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join("out").join(name)).unwrap()
}

#[test]
fn smoke_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(srrl(d, &["pretrain"]).status.code(), Some(0));
    assert_eq!(srrl(d, &["train"]).status.code(), Some(0));
    let metrics = read(d, "metrics.csv");
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 2, "{metrics}");
    assert_eq!(lines[0], METRICS_HEADER);

    assert_eq!(srrl(d, &["sample"]).status.code(), Some(0));
    // 1 condition x 3 samples x 3 rounds, plus header
    assert_eq!(read(d, "samples.csv").lines().count(), 10);
    assert!(read(d, "samples.svg").contains("viewBox=\"0 0 600 600\""));

    assert_eq!(srrl(d, &["eval"]).status.code(), Some(0));
    let eval = read(d, "eval.csv");
    assert_eq!(eval.lines().next(), Some("round,mean_reward"));
    assert_eq!(eval.lines().count(), 4);

    let resolved = read(d, "resolved.cfg");
    assert!(resolved.contains("train.group_size = 2"));
    assert!(resolved.contains("guidance.lambda_inference = 7.5"));
}

#[test]
fn runs_are_reproducible_across_execution_modes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, mode) in [(a.path(), "execution=parallel"), (b.path(), "execution=sequential")] {
        assert_eq!(srrl(dir, &["pretrain", "--set", mode]).status.code(), Some(0));
        assert_eq!(srrl(dir, &["train", "--set", mode, "--set", "train.group_size=4"]).status.code(), Some(0));
    }
    assert_eq!(read(a.path(), "metrics.csv"), read(b.path(), "metrics.csv"));
    // The provenance hash covers the execution mode, so compare everything else.
    let strip = |s: String| s.lines().filter(|l| !l.contains("config_hash")).collect::<Vec<_>>().join("\n");
    for f in ["pretrained.json", "trained.json"] {
        assert_eq!(strip(read(a.path(), f)), strip(read(b.path(), f)), "{f}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(srrl(dir.path(), &["pretrain", "--seed", "42"]).status.code(), Some(0));
    assert!(read(dir.path(), "resolved.cfg").contains("seed = 42\n"));
}

#[test]
fn config_errors_exit_one_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "seed = 1\n# fine\ntrain.rounds = lots\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_srrl"))
        .args(["pretrain", "--config", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    let missing =
        Command::new(env!("CARGO_BIN_EXE_srrl")).args(["eval", "--config", "/nonexistent.cfg"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));

    let usage = Command::new(env!("CARGO_BIN_EXE_srrl")).args(["train"]).output().unwrap();
    assert_eq!(usage.status.code(), Some(1));

    let help = Command::new(env!("CARGO_BIN_EXE_srrl")).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn version_mismatch_is_explicit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(srrl(d, &["pretrain"]).status.code(), Some(0));
    let path = d.join("out").join("pretrained.json");
    let text = std::fs::read_to_string(&path).unwrap().replacen("\"format_version\": 1", "\"format_version\": 2", 1);
    std::fs::write(&path, text).unwrap();
    let out = srrl(d, &["train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version 2 is not supported"));
}

#[test]
fn diagnose_reports_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = srrl(dir.path(), &["diagnose"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for name in ["backprop", "ppo_gradient", "inversion", "guidance_gap", "advantages", "density"] {
        assert!(stdout.contains(name), "{stdout}");
    }
    let faulty = srrl(dir.path(), &["diagnose", "--inject-fault", "--seed", "3"]);
    assert_eq!(faulty.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&faulty.stdout).contains("FAIL"));
}
