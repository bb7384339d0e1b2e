//! Post-hoc analysis of run logs and policies: stability metrics, zero-variance
//! fractions, length/reward correlation, per-turn info-gain heatmaps, and the
//! mask-sensitivity study. Also the CSV / JSON writers consumed by plotting.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::env::HiddenIntentTask;
use crate::infogain::{info_gain_per_turn, InfoGainError, MaskSpec, MaskStrategy};
use crate::policy::PolicyParams;
use crate::rollout::{mix_seed, run_episode, seeded_rng, valid_turn_flags, RolloutError};
use crate::trainer::StepReport;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("empty series: {0}")]
    Empty(&'static str),
    #[error("run log line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("mask sensitivity needs at least two strategies")]
    TooFewStrategies,
    #[error("could not collect {wanted} valid turns in {episodes} episodes")]
    NotEnoughTurns { wanted: usize, episodes: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    InfoGain(#[from] InfoGainError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}

pub fn read_run_log(path: &Path) -> Result<Vec<StepReport>, DiagnosticsError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DiagnosticsError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}

/// `(iteration, score)` pairs of the periodic evaluations in a run log.
pub fn eval_series(log: &[StepReport]) -> Vec<(usize, f64)> {
    log.iter().filter_map(|r| r.eval_success.map(|s| (r.iteration, s))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityMetrics {
    /// Mean final score over seeds.
    pub final_score: f64,
    /// Mean over seeds of best minus final score.
    pub best_to_final_drop: f64,
    /// Fraction of seeds whose final score is below `alpha` times their best.
    pub collapse_rate: f64,
}

/// Stability metrics over per-seed score sequences.
pub fn stability_metrics(seeds: &[Vec<f64>], alpha: f64) -> Result<StabilityMetrics, DiagnosticsError> {
    if seeds.is_empty() || seeds.iter().any(|s| s.is_empty()) {
        return Err(DiagnosticsError::Empty("stability metrics need at least one score per seed"));
    }
    let n = seeds.len() as f64;
    let mut final_sum = 0.0;
    let mut drop_sum = 0.0;
    let mut collapsed = 0usize;
    for scores in seeds {
        let last = *scores.last().expect("nonempty");
        let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        final_sum += last;
        drop_sum += best - last;
        if last < alpha * best {
            collapsed += 1;
        }
    }
    Ok(StabilityMetrics {
        final_score: final_sum / n,
        best_to_final_drop: drop_sum / n,
        collapse_rate: collapsed as f64 / n,
    })
}

/// Fraction of groups with zero outcome variance.
pub fn zero_variance_fraction(flags: &[bool]) -> Result<f64, DiagnosticsError> {
    if flags.is_empty() {
        return Err(DiagnosticsError::Empty("zero-variance window has no groups"));
    }
    Ok(flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64)
}

/// Share of iterations treated as the initial training phase.
pub const INITIAL_PHASE_FRACTION: f64 = 0.2;

/// Zero-variance fraction over the first `fraction` of iterations, split into
/// `buckets` equal-width windows.
pub fn initial_zero_variance(
    log: &[StepReport],
    fraction: f64,
    buckets: usize,
) -> Result<Vec<f64>, DiagnosticsError> {
    let window = ((log.len() as f64 * fraction).ceil() as usize).min(log.len());
    if window == 0 || buckets == 0 {
        return Err(DiagnosticsError::Empty("initial phase is empty"));
    }
    let buckets = buckets.min(window);
    (0..buckets)
        .map(|b| {
            let lo = b * window / buckets;
            let hi = (b + 1) * window / buckets;
            let flags: Vec<bool> = log[lo..hi].iter().flat_map(|r| r.zero_variance_flags.iter().copied()).collect();
            zero_variance_fraction(&flags)
        })
        .collect()
}

/// True when `values` is non-increasing except for at most `allowed` rises.
pub fn decreasing_with_tolerance(values: &[f64], allowed: usize) -> bool {
    values.windows(2).filter(|w| w[1] > w[0]).count() <= allowed
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    /// `None` when either variable has zero variance.
    pub value: Option<f64>,
    pub n: usize,
}

/// Pearson correlation of per-episode mean action length against reward.
pub fn length_reward_correlation(lengths: &[f64], rewards: &[f64]) -> Correlation {
    let n = lengths.len().min(rewards.len());
    if n < 2 {
        return Correlation { value: None, n };
    }
    let (xs, ys) = (&lengths[..n], &rewards[..n]);
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    let value = (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt());
    Correlation { value, n }
}

/// Mean valid-turn info gain by training-step bucket and turn index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// `cells[bucket][turn - 1]`, `None` when no valid turn contributed.
    pub cells: Vec<Vec<Option<f64>>>,
    /// First iteration of each bucket.
    pub bucket_starts: Vec<usize>,
}

pub const HEATMAP_BUCKETS: usize = 10;

impl Heatmap {
    /// 1-based turn index of the largest cell in a bucket.
    pub fn argmax_turn(&self, bucket: usize) -> Option<usize> {
        self.cells[bucket]
            .iter()
            .enumerate()
            .filter_map(|(t, c)| c.map(|v| (t, v)))
            .fold(None, |best: Option<(usize, f64)>, (t, v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((t, v)),
            })
            .map(|(t, _)| t + 1)
    }

    /// First and last buckets that have at least one cell.
    pub fn populated_ends(&self) -> Option<(usize, usize)> {
        let populated: Vec<usize> = (0..self.cells.len())
            .filter(|&b| self.cells[b].iter().any(Option::is_some))
            .collect();
        Some((*populated.first()?, *populated.last()?))
    }
}

/// Buckets iterations into `buckets` equal-width windows and averages the
/// per-turn values weighted by their valid-turn counts, pooling all runs.
pub fn turn_heatmap(runs: &[&[StepReport]], buckets: usize) -> Result<Heatmap, DiagnosticsError> {
    let n_iter = runs.iter().map(|r| r.len()).max().unwrap_or(0);
    if n_iter == 0 || buckets == 0 {
        return Err(DiagnosticsError::Empty("heatmap needs at least one step"));
    }
    let buckets = buckets.min(n_iter);
    let width = runs
        .iter()
        .flat_map(|r| r.iter().map(|s| s.per_turn_info_gain.len()))
        .max()
        .unwrap_or(0);
    let mut sums = vec![vec![(0.0, 0usize); width]; buckets];
    for run in runs {
        for (i, step) in run.iter().enumerate() {
            let b = i * buckets / n_iter;
            for (t, v) in step.per_turn_info_gain.iter().enumerate() {
                if let Some(v) = v {
                    let c = step.per_turn_valid_counts.get(t).copied().unwrap_or(1).max(1);
                    sums[b][t].0 += v * c as f64;
                    sums[b][t].1 += c;
                }
            }
        }
    }
    Ok(Heatmap {
        cells: sums
            .iter()
            .map(|row| row.iter().map(|&(s, c)| (c > 0).then(|| s / c as f64)).collect())
            .collect(),
        bucket_starts: (0..buckets).map(|b| (b * n_iter).div_ceil(buckets)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: MaskStrategy,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    /// `|mean - default mean| / |default mean|`, 0 when both are 0.
    pub relative_gap: f64,
    /// Two-sided Mann-Whitney p-value against the default strategy.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSensitivityReport {
    pub default_strategy: MaskStrategy,
    pub num_turns: usize,
    pub strategies: Vec<StrategySummary>,
    pub max_relative_gap: f64,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn relative_gap(mean: f64, reference: f64) -> f64 {
    let diff = (mean - reference).abs();
    if diff == 0.0 {
        0.0
    } else if reference == 0.0 {
        f64::INFINITY
    } else {
        diff / reference.abs()
    }
}

/// Two-sided Mann-Whitney U test, normal approximation with tie correction.
pub fn mann_whitney_p(a: &[f64], b: &[f64]) -> f64 {
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    if a.is_empty() || b.is_empty() {
        return 1.0;
    }
    let mut all: Vec<(f64, usize)> = a.iter().map(|&x| (x, 0)).chain(b.iter().map(|&x| (x, 1))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = all.len();
    let mut rank_sum_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        for item in &all[i..=j] {
            if item.1 == 0 {
                rank_sum_a += rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_a - n1 * (n1 + 1.0) / 2.0;
    let mean = n1 * n2 / 2.0;
    let nn = n as f64;
    let var = n1 * n2 / 12.0 * ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = (u - mean).abs() / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * (1.0 - normal.cdf(z))).min(1.0)
}

/// Scores a fixed sample of valid turns under each placeholder strategy.
///
/// Turns come from episodes sampled with the policy under `seed`; every
/// strategy sees the same turns. The first strategy is the reference.
pub fn mask_sensitivity(
    task: &HiddenIntentTask,
    policy: &PolicyParams,
    strategies: &[MaskStrategy],
    n_turns: usize,
    seed: u64,
) -> Result<MaskSensitivityReport, DiagnosticsError> {
    if strategies.len() < 2 {
        return Err(DiagnosticsError::TooFewStrategies);
    }
    let max_episodes = n_turns.max(1) * 50;
    let mut episodes = Vec::new();
    let mut collected = 0;
    let mut e = 0u64;
    while collected < n_turns {
        if e as usize >= max_episodes {
            return Err(DiagnosticsError::NotEnoughTurns {
                wanted: n_turns,
                episodes: max_episodes,
            });
        }
        let mut rng = seeded_rng(&[seed, e]);
        let intent = rng.gen_range(0..task.num_intents);
        let ep = run_episode(task, policy, intent, "mask", &mut rng)?;
        let flags = valid_turn_flags(&ep.trajectory);
        let valid = flags.iter().filter(|&&f| f).count();
        if valid > 0 {
            // keep only as many turns as still needed, in turn order
            let mut keep = n_turns - collected;
            let flags: Vec<bool> = flags
                .into_iter()
                .map(|f| {
                    let k = f && keep > 0;
                    if k {
                        keep -= 1;
                    }
                    k
                })
                .collect();
            collected += flags.iter().filter(|&&f| f).count();
            episodes.push((e, ep.trajectory, flags));
        }
        e += 1;
    }

    let mut samples: Vec<Vec<f64>> = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let mask = MaskSpec::new(strategy, task.vocab(), mix_seed(&[seed, 0x3A5C]));
        let mut values = Vec::with_capacity(n_turns);
        for (e, traj, flags) in &episodes {
            let row = info_gain_per_turn(task, traj, policy, &mask, flags, *e)?;
            values.extend(row.iter().filter(|r| r.valid).map(|r| r.value));
        }
        samples.push(values);
    }

    let reference_mean = samples[0].iter().sum::<f64>() / samples[0].len() as f64;
    let mut summaries = Vec::with_capacity(strategies.len());
    for (&strategy, values) in strategies.iter().zip(&samples) {
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let q1 = quantile(&sorted, 0.25);
        let q3 = quantile(&sorted, 0.75);
        summaries.push(StrategySummary {
            strategy,
            mean,
            median: quantile(&sorted, 0.5),
            q1,
            q3,
            iqr: q3 - q1,
            relative_gap: relative_gap(mean, reference_mean),
            p_value: mann_whitney_p(&samples[0], values),
        });
    }
    Ok(MaskSensitivityReport {
        default_strategy: strategies[0],
        num_turns: n_turns,
        max_relative_gap: summaries.iter().map(|s| s.relative_gap).fold(0.0, f64::max),
        strategies: summaries,
    })
}

/// Area under the training success curve, as the mean success rate per iteration.
pub fn success_auc(log: &[StepReport]) -> f64 {
    if log.is_empty() {
        return 0.0;
    }
    log.iter().map(|r| r.success_rate).sum::<f64>() / log.len() as f64
}

/// Last periodic evaluation, or the last training success rate without one.
pub fn final_success(log: &[StepReport]) -> Option<f64> {
    log.iter()
        .rev()
        .find_map(|r| r.eval_success)
        .or_else(|| log.last().map(|r| r.success_rate))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub iterations: usize,
    pub final_success: Option<f64>,
    pub success_auc: f64,
    pub stability: Option<StabilityMetrics>,
    pub initial_zero_variance: Vec<f64>,
    pub length_reward_correlation: Correlation,
    pub heatmap_argmax_first: Option<usize>,
    pub heatmap_argmax_last: Option<usize>,
    pub mean_info_contribution_ratio: f64,
}

pub fn summarize_run(name: &str, log: &[StepReport]) -> Result<RunSummary, DiagnosticsError> {
    if log.is_empty() {
        return Err(DiagnosticsError::Empty("run log has no steps"));
    }
    let evals: Vec<f64> = eval_series(log).into_iter().map(|(_, s)| s).collect();
    let stability = if evals.len() >= 2 {
        Some(stability_metrics(&[evals], 0.5)?)
    } else {
        None
    };
    let lengths: Vec<f64> = log.iter().flat_map(|r| r.episode_action_lengths.iter().copied()).collect();
    let rewards: Vec<f64> = log.iter().flat_map(|r| r.episode_rewards.iter().copied()).collect();
    let heatmap = turn_heatmap(&[log], HEATMAP_BUCKETS)?;
    let ends = heatmap.populated_ends();
    Ok(RunSummary {
        name: name.to_string(),
        iterations: log.len(),
        final_success: final_success(log),
        success_auc: success_auc(log),
        stability,
        initial_zero_variance: initial_zero_variance(log, INITIAL_PHASE_FRACTION, 5)?,
        length_reward_correlation: length_reward_correlation(&lengths, &rewards),
        heatmap_argmax_first: ends.and_then(|(f, _)| heatmap.argmax_turn(f)),
        heatmap_argmax_last: ends.and_then(|(_, l)| heatmap.argmax_turn(l)),
        mean_info_contribution_ratio: log.iter().map(|r| r.info_contribution_ratio).sum::<f64>() / log.len() as f64,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Writes the per-metric CSV tables for one run into `dir`.
pub fn write_metric_csvs(dir: &Path, log: &[StepReport]) -> Result<(), DiagnosticsError> {
    std::fs::create_dir_all(dir)?;

    let mut w = csv::Writer::from_path(dir.join("success.csv"))?;
    w.write_record(["iteration", "success_rate", "mean_ext_reward", "eval_success"])?;
    for r in log {
        w.write_record([
            r.iteration.to_string(),
            r.success_rate.to_string(),
            r.mean_ext_reward.to_string(),
            fmt_opt(r.eval_success),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("dynamics.csv"))?;
    w.write_record([
        "iteration",
        "mean_turns",
        "mean_action_length",
        "info_contribution_ratio",
        "grad_norm",
        "mean_kl",
        "loss",
    ])?;
    for r in log {
        w.write_record([
            r.iteration.to_string(),
            r.mean_turns.to_string(),
            r.mean_action_length.to_string(),
            r.info_contribution_ratio.to_string(),
            r.grad_norm.to_string(),
            r.mean_kl.to_string(),
            r.loss.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("zero_variance.csv"))?;
    w.write_record(["iteration", "zero_variance_fraction", "mean_gate"])?;
    for r in log {
        let frac = zero_variance_fraction(&r.zero_variance_flags).unwrap_or(0.0);
        let gate = r.gate_values.iter().sum::<f64>() / r.gate_values.len().max(1) as f64;
        w.write_record([r.iteration.to_string(), frac.to_string(), gate.to_string()])?;
    }
    w.flush()?;

    write_heatmap_csv(&dir.join("heatmap.csv"), &turn_heatmap(&[log], HEATMAP_BUCKETS)?)?;
    Ok(())
}

/// Long format: `bucket,bucket_start,turn,value` with empty value for absent cells.
pub fn write_heatmap_csv(path: &Path, heatmap: &Heatmap) -> Result<(), DiagnosticsError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bucket", "bucket_start", "turn", "value"])?;
    for (b, row) in heatmap.cells.iter().enumerate() {
        for (t, v) in row.iter().enumerate() {
            w.write_record([
                b.to_string(),
                heatmap.bucket_starts[b].to_string(),
                (t + 1).to_string(),
                fmt_opt(*v),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DiagnosticsError> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}
