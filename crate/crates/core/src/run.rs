//! Run orchestration behind the command-line tool: training runs with their
//! on-disk artifacts, ablation sweeps, verifier suites and replay.
//!
//! A run directory holds
//!
//! ```text
//! manifest.json        config snapshot, seed, artifact hashes, timestamp
//! run.log              one JSON step report per line
//! checkpoints/ckpt_N.bin
//! metrics/*.csv
//! summary.json
//! ```
//!
//! Only the manifest carries wall-clock data, so two runs of the same config
//! produce byte-identical logs and checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::advantage::Variant;
use crate::config::{ConfigError, RunConfig};
use crate::diagnostics::{
    self, read_run_log, stability_metrics, summarize_run, turn_heatmap, write_heatmap_csv, write_json,
    write_metric_csvs, DiagnosticsError, MaskSensitivityReport, RunSummary, StabilityMetrics,
};
use crate::env::HiddenIntentTask;
use crate::policy::{PolicyError, PolicyParams, PolicySpace};
use crate::rollout::seeded_rng;
use crate::theory::{verify_theorem1, verify_theorem2, Theorem1Report, Theorem2Report, TheoryError};
use crate::trainer::{TrainError, Trainer};

const THEORY_STREAM: u64 = 0x7E0A;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Manifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub job: Job,
    pub seed: u64,
    /// Every config key with its value, in canonical order.
    pub config: BTreeMap<String, String>,
    /// Relative artifact path to sha256 hex digest.
    pub artifacts: BTreeMap<String, String>,
    pub unix_time: u64,
    pub version: String,
}

impl Manifest {
    pub fn new(job: Job, cfg: &RunConfig) -> Self {
        Self {
            job,
            seed: cfg.seed,
            config: cfg.to_pairs().into_iter().collect(),
            artifacts: BTreeMap::new(),
            unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn run_config(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        for (k, v) in &self.config {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| RunError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), RunError> {
        let text = serde_json::to_string_pretty(self).map_err(|source| RunError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, text + "\n").map_err(io_err(path))
    }
}

pub fn sha256_file(path: &Path) -> Result<String, RunError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes every file under `dir` except the manifest itself.
fn hash_artifacts(dir: &Path) -> Result<BTreeMap<String, String>, RunError> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<(), RunError> {
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(io_err(dir))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if path.file_name().is_some_and(|n| n != "manifest.json" && n != "failure.json") {
                let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().replace('\\', "/");
                out.insert(rel, sha256_file(&path)?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub command: String,
    pub error: String,
    pub unix_time: u64,
}

/// Writes `failure.json` into `dir`, ignoring secondary errors.
pub fn record_failure(dir: &Path, command: &str, error: &str) {
    let record = FailureRecord {
        command: command.to_string(),
        error: error.to_string(),
        unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    if fs::create_dir_all(dir).is_ok() {
        let _ = write_json(&dir.join("failure.json"), &record);
    }
}

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("ckpt_{iteration}.bin"))
}

pub fn save_checkpoint(path: &Path, params: &PolicyParams) -> Result<(), RunError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    params.write_checkpoint(&mut w)?;
    w.flush().map_err(io_err(path))
}

pub fn load_checkpoint(task: &HiddenIntentTask, path: &Path) -> Result<PolicyParams, RunError> {
    let file = File::open(path).map_err(io_err(path))?;
    Ok(PolicyParams::read_checkpoint(
        PolicySpace::for_task(task),
        std::io::BufReader::new(file),
    )?)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub log: Vec<crate::trainer::StepReport>,
    pub summary: RunSummary,
    pub final_checkpoint: PathBuf,
    pub params: PolicyParams,
}

fn train_into(cfg: &RunConfig, dir: &Path) -> Result<TrainOutcome, RunError> {
    let task = cfg.task()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let log_path = dir.join("run.log");
    let mut log_writer = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let mut trainer = Trainer::new(task, cfg.train_setup())?;
    let mut log = Vec::with_capacity(cfg.trainer.iterations);
    while !trainer.is_done() {
        let report = trainer.step()?;
        let line = serde_json::to_string(&report).map_err(|source| RunError::Json {
            path: log_path.clone(),
            source,
        })?;
        writeln!(log_writer, "{line}").map_err(io_err(&log_path))?;
        log.push(report);
        let done = trainer.iteration();
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && !trainer.is_done() {
            save_checkpoint(&checkpoint_path(dir, done), trainer.params())?;
        }
    }
    log_writer.flush().map_err(io_err(&log_path))?;
    let final_checkpoint = checkpoint_path(dir, trainer.iteration());
    save_checkpoint(&final_checkpoint, trainer.params())?;

    write_metric_csvs(&dir.join("metrics"), &log)?;
    let heatmap = turn_heatmap(&[&log], cfg.heatmap_buckets)?;
    write_heatmap_csv(&dir.join("metrics").join("heatmap.csv"), &heatmap)?;
    let summary = summarize_run(cfg.ablation.name(), &log)?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(TrainOutcome {
        dir: dir.to_path_buf(),
        log,
        summary,
        final_checkpoint,
        params: trainer.params().clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub variant: String,
    pub summary: RunSummary,
}

fn ablate_into(cfg: &RunConfig, dir: &Path) -> Result<Vec<AblationEntry>, RunError> {
    let mut entries = Vec::new();
    for variant in Variant::ALL {
        let mut sub = cfg.clone();
        sub.ablation = variant;
        let outcome = train_into(&sub, &dir.join(variant.name()))?;
        entries.push(AblationEntry {
            variant: variant.name().to_string(),
            summary: outcome.summary,
        });
    }
    write_json(&dir.join("ablation.json"), &entries)?;
    Ok(entries)
}

/// Random policies for the verifier suites, one stream per index.
pub fn random_policies(cfg: &RunConfig, task: &HiddenIntentTask, count: usize) -> Vec<PolicyParams> {
    (0..count as u64)
        .map(|i| {
            let mut rng = seeded_rng(&[cfg.seed, THEORY_STREAM, i]);
            PolicyParams::random(PolicySpace::for_task(task), cfg.theory_policy_scale, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Suite {
    pub tolerance: f64,
    pub reports: Vec<Theorem1Report>,
    pub max_abs_error: f64,
    pub pass: bool,
    /// Number of policies whose corrupted marginal stayed within tolerance.
    pub negative_control_misses: usize,
}

pub fn theorem1_suite(task: &HiddenIntentTask, policies: &[PolicyParams], tol: f64) -> Result<Theorem1Suite, RunError> {
    let reports = policies
        .iter()
        .map(|p| verify_theorem1(task, p, tol))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Theorem1Suite {
        tolerance: tol,
        max_abs_error: reports.iter().map(|r| r.max_abs_error.max(r.total_abs_error)).fold(0.0, f64::max),
        pass: reports.iter().all(|r| r.pass),
        negative_control_misses: reports.iter().filter(|r| r.negative_control_error <= tol).count(),
        reports,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Suite {
    pub reports: Vec<Theorem2Report>,
    pub violations: usize,
    pub action_mi_violations: usize,
    pub pass: bool,
}

pub fn theorem2_suite(task: &HiddenIntentTask, policies: &[PolicyParams]) -> Result<Theorem2Suite, RunError> {
    let reports = policies
        .iter()
        .map(|p| verify_theorem2(task, p))
        .collect::<Result<Vec<_>, _>>()?;
    let violations = reports.iter().filter(|r| !r.pass).count();
    Ok(Theorem2Suite {
        action_mi_violations: reports.iter().filter(|r| !r.action_mi_pass).count(),
        pass: violations == 0,
        violations,
        reports,
    })
}

pub fn mask_sensitivity_run(cfg: &RunConfig, policy: Option<&PolicyParams>) -> Result<MaskSensitivityReport, RunError> {
    let task = cfg.task()?;
    let owned;
    let policy = match policy {
        Some(p) => p,
        None => {
            owned = random_policies(cfg, &task, 1).remove(0);
            &owned
        }
    };
    Ok(diagnostics::mask_sensitivity(
        &task,
        policy,
        &cfg.mask_strategies,
        cfg.mask_turns,
        cfg.seed,
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<RunSummary>,
    /// Across runs, from their periodic evaluations.
    pub stability: Option<StabilityMetrics>,
}

fn report_into(cfg: &RunConfig, run_dirs: &[PathBuf], out: &Path) -> Result<Report, RunError> {
    let mut logs = Vec::new();
    let mut runs = Vec::new();
    for dir in run_dirs {
        let log = read_run_log(&dir.join("run.log"))?;
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        runs.push(summarize_run(&name, &log)?);
        logs.push(log);
    }
    let series: Vec<Vec<f64>> = logs
        .iter()
        .map(|l| diagnostics::eval_series(l).into_iter().map(|(_, s)| s).collect::<Vec<_>>())
        .collect();
    let stability = if !series.is_empty() && series.iter().all(|s| s.len() >= 2 && s.len() == series[0].len()) {
        Some(stability_metrics(&series, cfg.stability_alpha)?)
    } else {
        None
    };
    fs::create_dir_all(out).map_err(io_err(out))?;
    let refs: Vec<&[crate::trainer::StepReport]> = logs.iter().map(Vec::as_slice).collect();
    if !refs.is_empty() {
        let heatmap = turn_heatmap(&refs, cfg.heatmap_buckets)?;
        write_heatmap_csv(&out.join("heatmap.csv"), &heatmap)?;
    }
    let report = Report { runs, stability };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub original: PathBuf,
    pub replay: PathBuf,
    /// Artifacts whose hashes differ or that exist on one side only.
    pub mismatched: Vec<String>,
    pub compared: usize,
    pub identical: bool,
}

/// Re-runs a job from its manifest into `out` and compares artifact hashes.
pub fn replay(original: &Path, out: &Path) -> Result<ReplayReport, RunError> {
    let manifest = Manifest::load(&original.join("manifest.json"))?;
    if manifest.artifacts.is_empty() {
        return Err(RunError::Manifest("manifest lists no artifacts; the job did not finish".into()));
    }
    let cfg = manifest.run_config()?;
    run_job(&manifest.job, &cfg, out)?;
    let fresh = Manifest::load(&out.join("manifest.json"))?;
    let mut keys: Vec<&String> = manifest.artifacts.keys().chain(fresh.artifacts.keys()).collect();
    keys.sort();
    keys.dedup();
    let mismatched: Vec<String> = keys
        .iter()
        .filter(|k| manifest.artifacts.get(**k) != fresh.artifacts.get(**k))
        .map(|k| k.to_string())
        .collect();
    Ok(ReplayReport {
        original: original.to_path_buf(),
        replay: out.to_path_buf(),
        compared: keys.len(),
        identical: mismatched.is_empty(),
        mismatched,
    })
}

/// One subcommand with its file inputs, as recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    Train,
    Ablate,
    VerifyTheorem1 { checkpoints: Vec<PathBuf> },
    VerifyTheorem2 { checkpoints: Vec<PathBuf> },
    MaskSensitivity { checkpoint: Option<PathBuf> },
    Report { runs: Vec<PathBuf> },
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Train => "train",
            Job::Ablate => "ablate",
            Job::VerifyTheorem1 { .. } => "verify-theorem1",
            Job::VerifyTheorem2 { .. } => "verify-theorem2",
            Job::MaskSensitivity { .. } => "mask-sensitivity",
            Job::Report { .. } => "report",
        }
    }

    /// Same job with input paths made absolute, so a replay does not depend
    /// on the working directory.
    fn absolute(&self) -> Job {
        let abs = |p: &PathBuf| fs::canonicalize(p).unwrap_or_else(|_| p.clone());
        match self {
            Job::VerifyTheorem1 { checkpoints } => Job::VerifyTheorem1 {
                checkpoints: checkpoints.iter().map(abs).collect(),
            },
            Job::VerifyTheorem2 { checkpoints } => Job::VerifyTheorem2 {
                checkpoints: checkpoints.iter().map(abs).collect(),
            },
            Job::MaskSensitivity { checkpoint } => Job::MaskSensitivity {
                checkpoint: checkpoint.as_ref().map(abs),
            },
            Job::Report { runs } => Job::Report {
                runs: runs.iter().map(abs).collect(),
            },
            other => other.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum JobOutput {
    Train(Box<TrainOutcome>),
    Ablate(Vec<AblationEntry>),
    Theorem1(Theorem1Suite),
    Theorem2(Theorem2Suite),
    MaskSensitivity(MaskSensitivityReport),
    Report(Report),
}

impl JobOutput {
    /// Whether a verifier job found no violations; other jobs always pass.
    pub fn passed(&self) -> bool {
        match self {
            JobOutput::Theorem1(s) => s.pass,
            JobOutput::Theorem2(s) => s.pass,
            _ => true,
        }
    }
}

fn verifier_policies(cfg: &RunConfig, task: &HiddenIntentTask, checkpoints: &[PathBuf]) -> Result<Vec<PolicyParams>, RunError> {
    let mut policies = random_policies(cfg, task, cfg.theory_policies);
    for path in checkpoints {
        policies.push(load_checkpoint(task, path)?);
    }
    Ok(policies)
}

/// Validates the config, runs the job into `dir` and writes its manifest.
pub fn run_job(job: &Job, cfg: &RunConfig, dir: &Path) -> Result<JobOutput, RunError> {
    cfg.validate()?;
    let job = job.absolute();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = Manifest::new(job.clone(), cfg);
    manifest.save(&dir.join("manifest.json"))?;
    let task = cfg.task()?;
    let output = match &job {
        Job::Train => JobOutput::Train(Box::new(train_into(cfg, dir)?)),
        Job::Ablate => JobOutput::Ablate(ablate_into(cfg, dir)?),
        Job::VerifyTheorem1 { checkpoints } => {
            let suite = theorem1_suite(&task, &verifier_policies(cfg, &task, checkpoints)?, cfg.theory_tolerance)?;
            write_json(&dir.join("theorem1.json"), &suite)?;
            JobOutput::Theorem1(suite)
        }
        Job::VerifyTheorem2 { checkpoints } => {
            let suite = theorem2_suite(&task, &verifier_policies(cfg, &task, checkpoints)?)?;
            write_json(&dir.join("theorem2.json"), &suite)?;
            JobOutput::Theorem2(suite)
        }
        Job::MaskSensitivity { checkpoint } => {
            let policy = checkpoint.as_ref().map(|p| load_checkpoint(&task, p)).transpose()?;
            let report = mask_sensitivity_run(cfg, policy.as_ref())?;
            write_json(&dir.join("mask_sensitivity.json"), &report)?;
            JobOutput::MaskSensitivity(report)
        }
        Job::Report { runs } => JobOutput::Report(report_into(cfg, runs, dir)?),
    };
    manifest.artifacts = hash_artifacts(dir)?;
    manifest.save(&dir.join("manifest.json"))?;
    Ok(output)
}

/// Trains one policy and writes the full run directory.
pub fn train_run(cfg: &RunConfig, dir: &Path) -> Result<TrainOutcome, RunError> {
    match run_job(&Job::Train, cfg, dir)? {
        JobOutput::Train(outcome) => Ok(*outcome),
        _ => unreachable!("train job yields a train outcome"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::parse_str(
            "env.M = 2\nenv.K = 1\nenv.horizon = 2\ntrainer.iterations = 6\ntrainer.eval_every = 3\n\
             trainer.eval_episodes = 20\ntrainer.checkpoint_every = 2\nseed = 3\n",
        )
        .unwrap();
        cfg.output_dir = PathBuf::from("unused");
        cfg
    }

    #[test]
    fn train_run_writes_artifacts_and_replays() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("a");
        let outcome = train_run(&tiny(), &dir).unwrap();
        assert_eq!(outcome.log.len(), 6);
        for f in ["run.log", "summary.json", "metrics/success.csv", "metrics/heatmap.csv", "checkpoints/ckpt_2.bin", "checkpoints/ckpt_6.bin"] {
            assert!(dir.join(f).exists(), "{f}");
        }
        let manifest = Manifest::load(&dir.join("manifest.json")).unwrap();
        assert_eq!(manifest.run_config().unwrap(), tiny());
        assert!(manifest.artifacts.contains_key("run.log"));
        assert_eq!(read_run_log(&dir.join("run.log")).unwrap(), outcome.log);

        let task = tiny().task().unwrap();
        let back = load_checkpoint(&task, &outcome.final_checkpoint).unwrap();
        assert_eq!(back.weights(), outcome.params.weights());

        let rep = replay(&dir, &tmp.path().join("b")).unwrap();
        assert!(rep.identical, "{:?}", rep.mismatched);
        assert!(rep.compared >= 6);
    }

    #[test]
    fn replay_detects_tampering() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("a");
        train_run(&tiny(), &dir).unwrap();
        let log = dir.join("run.log");
        let mut text = fs::read_to_string(&log).unwrap();
        text.push('\n');
        fs::write(&log, text).unwrap();
        let mut manifest = Manifest::load(&dir.join("manifest.json")).unwrap();
        manifest.artifacts.insert("run.log".into(), sha256_file(&log).unwrap());
        manifest.save(&dir.join("manifest.json")).unwrap();
        let rep = replay(&dir, &tmp.path().join("b")).unwrap();
        assert_eq!(rep.mismatched, vec!["run.log".to_string()]);
    }

    #[test]
    fn verifier_suites_on_micro_task() {
        let cfg = tiny();
        let task = cfg.task().unwrap();
        let policies = random_policies(&cfg, &task, 5);
        let s1 = theorem1_suite(&task, &policies, 1e-10).unwrap();
        assert!(s1.pass);
        assert_eq!(s1.reports.len(), 5);
        let s2 = theorem2_suite(&task, &policies).unwrap();
        assert_eq!(s2.reports.len(), 5);
    }

    #[test]
    fn verifier_jobs_replay() {
        let tmp = tempfile::tempdir().unwrap();
        let train = train_run(&tiny(), &tmp.path().join("t")).unwrap();
        let jobs = [
            Job::VerifyTheorem1 { checkpoints: vec![train.final_checkpoint.clone()] },
            Job::VerifyTheorem2 { checkpoints: vec![] },
            Job::MaskSensitivity { checkpoint: Some(train.final_checkpoint.clone()) },
            Job::Report { runs: vec![tmp.path().join("t")] },
        ];
        for (i, job) in jobs.iter().enumerate() {
            let mut cfg = tiny();
            cfg.mask_turns = 30;
            let dir = tmp.path().join(format!("j{i}"));
            run_job(job, &cfg, &dir).unwrap();
            let rep = replay(&dir, &tmp.path().join(format!("r{i}"))).unwrap();
            assert!(rep.identical && rep.compared > 0, "{}: {:?}", job.name(), rep.mismatched);
        }
    }

    #[test]
    fn failure_record_is_written() {
        let tmp = tempfile::tempdir().unwrap();
        record_failure(tmp.path(), "train", "boom");
        let text = fs::read_to_string(tmp.path().join("failure.json")).unwrap();
        assert!(text.contains("boom"));
    }
}
