use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use srrl::harness::{self, ExperimentConfig, Fault, PRETRAINED_FILE, TRAINED_FILE};
use srrl::Error;

/// Self-reflective RL fine-tuning of toy conditional diffusion models.
#[derive(Debug, Parser)]
#[command(name = "srrl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides a config key, e.g. `--set train.rounds=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the denoiser on the toy dataset.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Reflective RL fine-tuning.
    Train {
        #[command(flatten)]
        common: Common,
        /// Starting checkpoint [default: <output_dir>/pretrained.json].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Draw reflective samples and plot them.
    Sample {
        #[command(flatten)]
        common: Common,
        /// [default: <output_dir>/trained.json]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Mean reward per reflection round.
    Eval {
        #[command(flatten)]
        common: Common,
        /// [default: <output_dir>/trained.json]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the numerical self-checks.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Deliberately break one check (chosen by seed) to show it is caught.
        #[arg(long)]
        inject_fault: bool,
    },
}

fn load(common: &Common) -> srrl::Result<ExperimentConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    ExperimentConfig::load(&common.config, &overrides)
}

fn run(command: Command) -> srrl::Result<()> {
    match command {
        Command::Pretrain { common } => {
            let cfg = load(&common)?;
            let path = harness::run_pretrain(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Train { common, checkpoint } => {
            let cfg = load(&common)?;
            let ck = checkpoint.unwrap_or_else(|| cfg.output_dir.join(PRETRAINED_FILE));
            let (path, rows) = harness::run_train(&cfg, &ck)?;
            if let Some(last) = rows.last() {
                println!("final batch mean reward {:.4}", last.mean_reward);
            }
            println!("wrote {}", path.display());
        }
        Command::Sample { common, checkpoint } => {
            let cfg = load(&common)?;
            let ck = checkpoint.unwrap_or_else(|| cfg.output_dir.join(TRAINED_FILE));
            let records = harness::run_sample(&cfg, &ck)?;
            println!("wrote {} samples to {}", records.len(), cfg.output_dir.join("samples.csv").display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load(&common)?;
            let ck = checkpoint.unwrap_or_else(|| cfg.output_dir.join(TRAINED_FILE));
            for (k, m) in harness::run_eval(&cfg, &ck)?.iter().enumerate() {
                println!("round {k}: mean reward {m:.4}");
            }
        }
        Command::Diagnose { common, inject_fault } => {
            let cfg = load(&common)?;
            let fault = inject_fault.then(|| Fault::from_seed(cfg.seed));
            if let Some(f) = fault {
                println!("injected fault: {f:?}");
            }
            let report = harness::run_diagnose(&cfg, fault)?;
            for c in &report.checks {
                println!("{c}");
            }
            if !report.all_passed() {
                let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
                return Err(Error::CheckFailed(failed.join(", ")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
