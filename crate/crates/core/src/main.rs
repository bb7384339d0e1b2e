use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use infopo::config::RunConfig;
use infopo::run::{self, Job, JobOutput, RunError};

#[derive(Parser)]
#[command(name = "infopo", version, about = "Information-gain policy optimisation on a hidden-intent querying task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set trainer.iterations=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (defaults to `output_dir` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy.
    Train(Common),
    /// Train every advantage variant with the same settings.
    Ablate(Common),
    /// Check the per-turn information gain against exact conditional mutual information.
    VerifyTheorem1 {
        #[command(flatten)]
        common: Common,
        /// Checkpoints to verify in addition to the random policies.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Check the Fano lower bound on accumulated information.
    VerifyTheorem2 {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Compare information-gain estimates across placeholder strategies.
    MaskSensitivity {
        #[command(flatten)]
        common: Common,
        /// Policy to score; a random policy when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Summarise finished run directories.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Re-run any job from its manifest and compare artifacts.
    Replay {
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Common {
    fn load(&self) -> Result<RunConfig, RunError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Command {
    fn job(&self) -> Option<(Job, &Common)> {
        Some(match self {
            Command::Train(c) => (Job::Train, c),
            Command::Ablate(c) => (Job::Ablate, c),
            Command::VerifyTheorem1 { common, checkpoints } => (
                Job::VerifyTheorem1 {
                    checkpoints: checkpoints.clone(),
                },
                common,
            ),
            Command::VerifyTheorem2 { common, checkpoints } => (
                Job::VerifyTheorem2 {
                    checkpoints: checkpoints.clone(),
                },
                common,
            ),
            Command::MaskSensitivity { common, checkpoint } => (
                Job::MaskSensitivity {
                    checkpoint: checkpoint.clone(),
                },
                common,
            ),
            Command::Report { common, runs } => (Job::Report { runs: runs.clone() }, common),
            Command::Replay { .. } => return None,
        })
    }
}

fn print_output(output: &JobOutput, dir: &Path) {
    match output {
        JobOutput::Train(outcome) => println!(
            "trained {} iterations: final success {:.3}, auc {:.3} -> {}",
            outcome.log.len(),
            outcome.summary.final_success.unwrap_or(f64::NAN),
            outcome.summary.success_auc,
            dir.display()
        ),
        JobOutput::Ablate(entries) => {
            for e in entries {
                println!(
                    "{:<8} final {:.3} auc {:.3}",
                    e.variant,
                    e.summary.final_success.unwrap_or(f64::NAN),
                    e.summary.success_auc
                );
            }
        }
        JobOutput::Theorem1(suite) => println!(
            "{} tol={:e} policies={} max_abs_error={:.3e} negative_control_misses={}",
            if suite.pass { "PASS" } else { "FAIL" },
            suite.tolerance,
            suite.reports.len(),
            suite.max_abs_error,
            suite.negative_control_misses
        ),
        JobOutput::Theorem2(suite) => println!(
            "{} policies={} violations={} action_mi_violations={}",
            if suite.pass { "PASS" } else { "FAIL" },
            suite.reports.len(),
            suite.violations,
            suite.action_mi_violations
        ),
        JobOutput::MaskSensitivity(report) => {
            for s in &report.strategies {
                println!(
                    "{:<8} mean {:+.5} median {:+.5} iqr {:.5} gap {:.4} p {:.3}",
                    s.strategy.name(),
                    s.mean,
                    s.median,
                    s.iqr,
                    s.relative_gap,
                    s.p_value
                );
            }
            println!("max relative gap {:.4}", report.max_relative_gap);
        }
        JobOutput::Report(report) => {
            for r in &report.runs {
                println!(
                    "{:<8} iterations {} final {:.3} auc {:.3}",
                    r.name,
                    r.iterations,
                    r.final_success.unwrap_or(f64::NAN),
                    r.success_auc
                );
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some((job, common)) = cli.command.job() else {
        let Command::Replay { run, out } = &cli.command else {
            unreachable!("only replay has no job")
        };
        return match run::replay(run, out) {
            Ok(rep) if rep.identical => {
                println!("REPLAY MATCH {} artifacts", rep.compared);
                ExitCode::SUCCESS
            }
            Ok(rep) => {
                println!("REPLAY MISMATCH {}", rep.mismatched.join(" "));
                ExitCode::FAILURE
            }
            Err(e) => {
                eprintln!("error: {e}");
                run::record_failure(out, "replay", &e.to_string());
                ExitCode::FAILURE
            }
        };
    };
    let cfg = match common.load() {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    match run::run_job(&job, &cfg, &cfg.output_dir) {
        Ok(output) => {
            print_output(&output, &cfg.output_dir);
            if output.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            run::record_failure(&cfg.output_dir, job.name(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
