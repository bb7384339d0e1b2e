//! Flat `key = value` run configuration with dotted sections.
//!
//! ```text
//! # comment
//! env.M = 8
//! env.K = 3
//! trainer.optimizer = adam
//! ```
//!
//! Unknown keys and unparsable values are rejected with the offending key.
//! [`RunConfig::to_pairs`] lists every key in a fixed order, which is the form
//! stored in run manifests.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advantage::{AdvantageConfig, GateConfig, InfoPooling, Variant};
use crate::env::{EnvError, HiddenIntentTask};
use crate::infogain::{InfoGainMode, MaskStrategy};
use crate::rollout::RolloutConfig;
use crate::trainer::{InfoGainSettings, Optimizer, TrainSetup, TrainerConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value {value:?} for `{key}`: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("invalid task: {0}")]
    Task(#[from] EnvError),
    #[error("could not read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Task table: the binary encoding of the intent index, or explicit rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableSpec {
    Binary,
    Rows(Vec<Vec<bool>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub num_intents: usize,
    pub num_attributes: usize,
    pub noise: f64,
    pub horizon: usize,
    pub table: TableSpec,
    pub group_size: usize,
    /// Overrides `env.horizon` when set.
    pub rollout_horizon: Option<usize>,
    /// Overrides `seed` for rollouts when set.
    pub rollout_seed: Option<u64>,
    pub shared_intent: bool,
    pub beta: f64,
    pub gate_temperature: f64,
    pub epsilon: f64,
    pub ablation: Variant,
    pub info_pooling: InfoPooling,
    pub trainer: TrainerConfig,
    pub checkpoint_every: usize,
    pub infogain_mode: InfoGainMode,
    pub mask: MaskStrategy,
    pub stability_alpha: f64,
    pub heatmap_buckets: usize,
    pub initial_phase: f64,
    pub mask_turns: usize,
    pub mask_strategies: Vec<MaskStrategy>,
    pub theory_tolerance: f64,
    pub theory_policies: usize,
    pub theory_policy_scale: f64,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            num_intents: 4,
            num_attributes: 2,
            noise: 0.0,
            horizon: 3,
            table: TableSpec::Binary,
            group_size: 5,
            rollout_horizon: None,
            rollout_seed: None,
            shared_intent: false,
            beta: 0.5,
            gate_temperature: 0.5,
            epsilon: crate::domain::DEFAULT_EPSILON,
            ablation: Variant::Full,
            info_pooling: InfoPooling::Group,
            trainer: TrainerConfig::default(),
            checkpoint_every: 50,
            infogain_mode: InfoGainMode::Placeholder,
            mask: MaskStrategy::FixedMaskToken,
            stability_alpha: 0.5,
            heatmap_buckets: crate::diagnostics::HEATMAP_BUCKETS,
            initial_phase: crate::diagnostics::INITIAL_PHASE_FRACTION,
            mask_turns: 500,
            mask_strategies: MaskStrategy::ALL.to_vec(),
            theory_tolerance: 1e-10,
            theory_policies: 20,
            theory_policy_scale: 2.0,
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn invalid(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_table(key: &str, value: &str) -> Result<TableSpec, ConfigError> {
    if value == "binary" {
        return Ok(TableSpec::Binary);
    }
    let rows = value
        .split(',')
        .map(|row| {
            row.trim()
                .chars()
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    _ => Err(invalid(key, value, "rows are strings of 0/1 separated by commas")),
                })
                .collect::<Result<Vec<bool>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TableSpec::Rows(rows))
}

fn format_table(table: &TableSpec) -> String {
    match table {
        TableSpec::Binary => "binary".to_string(),
        TableSpec::Rows(rows) => rows
            .iter()
            .map(|r| r.iter().map(|&b| if b { '1' } else { '0' }).collect::<String>())
            .collect::<Vec<_>>()
            .join(","),
    }
}

fn optimizer_name(o: Optimizer) -> &'static str {
    match o {
        Optimizer::Sgd => "sgd",
        Optimizer::Adam => "adam",
    }
}

fn ablation_name(v: Variant) -> &'static str {
    match v {
        Variant::Full => "none",
        other => other.name(),
    }
}

fn pooling_name(p: InfoPooling) -> &'static str {
    match p {
        InfoPooling::Group => "group",
        InfoPooling::Trajectory => "trajectory",
    }
}

fn mode_name(m: InfoGainMode) -> &'static str {
    match m {
        InfoGainMode::Placeholder => "placeholder",
        InfoGainMode::ExactMarginal => "marginal",
    }
}

fn fmt_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), ToString::to_string)
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "env.M" => self.num_intents = parse(key, v)?,
            "env.K" => self.num_attributes = parse(key, v)?,
            "env.noise" => self.noise = parse(key, v)?,
            "env.horizon" => self.horizon = parse(key, v)?,
            "env.table" => self.table = parse_table(key, v)?,
            "rollout.group_size" => self.group_size = parse(key, v)?,
            "rollout.horizon" => self.rollout_horizon = parse_optional(key, v)?,
            "rollout.seed" => self.rollout_seed = parse_optional(key, v)?,
            "group.shared_intent" => self.shared_intent = parse(key, v)?,
            "advantage.beta" => self.beta = parse(key, v)?,
            "advantage.gate_temperature" => self.gate_temperature = parse(key, v)?,
            "advantage.epsilon" => self.epsilon = parse(key, v)?,
            "advantage.ablation" => {
                self.ablation = Variant::parse(v).ok_or_else(|| invalid(key, v, "expected none|no_gate|no_std|no_ext|grpo"))?
            }
            "advantage.info_pooling" => {
                self.info_pooling = match v {
                    "group" => InfoPooling::Group,
                    "trajectory" => InfoPooling::Trajectory,
                    _ => return Err(invalid(key, v, "expected group|trajectory")),
                }
            }
            "trainer.clip_eps" => self.trainer.clip_eps = parse(key, v)?,
            "trainer.kl_coef" => self.trainer.kl_coef = parse(key, v)?,
            "trainer.learning_rate" => self.trainer.learning_rate = parse(key, v)?,
            "trainer.iterations" => self.trainer.iterations = parse(key, v)?,
            "trainer.inner_epochs" => self.trainer.inner_epochs = parse(key, v)?,
            "trainer.groups_per_iter" => self.trainer.groups_per_iter = parse(key, v)?,
            "trainer.optimizer" => {
                self.trainer.optimizer = match v {
                    "sgd" => Optimizer::Sgd,
                    "adam" => Optimizer::Adam,
                    _ => return Err(invalid(key, v, "expected sgd|adam")),
                }
            }
            "trainer.init_scale" => self.trainer.init_scale = parse(key, v)?,
            "trainer.eval_every" => self.trainer.eval_every = parse(key, v)?,
            "trainer.eval_episodes" => self.trainer.eval_episodes = parse(key, v)?,
            "trainer.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "infogain.mode" => {
                self.infogain_mode = match v {
                    "placeholder" => InfoGainMode::Placeholder,
                    "marginal" => InfoGainMode::ExactMarginal,
                    _ => return Err(invalid(key, v, "expected placeholder|marginal")),
                }
            }
            "infogain.mask" => {
                self.mask = MaskStrategy::parse(v).ok_or_else(|| invalid(key, v, "expected default|alt|random|fixed"))?
            }
            "diagnostics.alpha" => self.stability_alpha = parse(key, v)?,
            "diagnostics.heatmap_buckets" => self.heatmap_buckets = parse(key, v)?,
            "diagnostics.initial_phase" => self.initial_phase = parse(key, v)?,
            "diagnostics.mask_turns" => self.mask_turns = parse(key, v)?,
            "diagnostics.mask_strategies" => {
                self.mask_strategies = v
                    .split(',')
                    .map(|s| MaskStrategy::parse(s.trim()).ok_or_else(|| invalid(key, v, "expected a list of default|alt|random|fixed")))
                    .collect::<Result<_, _>>()?
            }
            "theory.tolerance" => self.theory_tolerance = parse(key, v)?,
            "theory.policies" => self.theory_policies = parse(key, v)?,
            "theory.policy_scale" => self.theory_policy_scale = parse(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "seed" => self.seed = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let t = &self.trainer;
        let pairs: Vec<(&str, String)> = vec![
            ("env.M", self.num_intents.to_string()),
            ("env.K", self.num_attributes.to_string()),
            ("env.noise", self.noise.to_string()),
            ("env.horizon", self.horizon.to_string()),
            ("env.table", format_table(&self.table)),
            ("rollout.group_size", self.group_size.to_string()),
            ("rollout.horizon", fmt_opt(&self.rollout_horizon)),
            ("rollout.seed", fmt_opt(&self.rollout_seed)),
            ("group.shared_intent", self.shared_intent.to_string()),
            ("advantage.beta", self.beta.to_string()),
            ("advantage.gate_temperature", self.gate_temperature.to_string()),
            ("advantage.epsilon", self.epsilon.to_string()),
            ("advantage.ablation", ablation_name(self.ablation).to_string()),
            ("advantage.info_pooling", pooling_name(self.info_pooling).to_string()),
            ("trainer.clip_eps", t.clip_eps.to_string()),
            ("trainer.kl_coef", t.kl_coef.to_string()),
            ("trainer.learning_rate", t.learning_rate.to_string()),
            ("trainer.iterations", t.iterations.to_string()),
            ("trainer.inner_epochs", t.inner_epochs.to_string()),
            ("trainer.groups_per_iter", t.groups_per_iter.to_string()),
            ("trainer.optimizer", optimizer_name(t.optimizer).to_string()),
            ("trainer.init_scale", t.init_scale.to_string()),
            ("trainer.eval_every", t.eval_every.to_string()),
            ("trainer.eval_episodes", t.eval_episodes.to_string()),
            ("trainer.checkpoint_every", self.checkpoint_every.to_string()),
            ("infogain.mode", mode_name(self.infogain_mode).to_string()),
            ("infogain.mask", self.mask.name().to_string()),
            ("diagnostics.alpha", self.stability_alpha.to_string()),
            ("diagnostics.heatmap_buckets", self.heatmap_buckets.to_string()),
            ("diagnostics.initial_phase", self.initial_phase.to_string()),
            ("diagnostics.mask_turns", self.mask_turns.to_string()),
            (
                "diagnostics.mask_strategies",
                self.mask_strategies.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
            ),
            ("theory.tolerance", self.theory_tolerance.to_string()),
            ("theory.policies", self.theory_policies.to_string()),
            ("theory.policy_scale", self.theory_policy_scale.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("seed", self.seed.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parses config text on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_str(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: assignment.to_string(),
        })?;
        self.set(k.trim(), v.trim())
    }

    pub fn effective_horizon(&self) -> usize {
        self.rollout_horizon.unwrap_or(self.horizon)
    }

    pub fn task(&self) -> Result<HiddenIntentTask, ConfigError> {
        let horizon = self.effective_horizon();
        let task = match &self.table {
            TableSpec::Binary => HiddenIntentTask::binary(self.num_intents, self.num_attributes, self.noise, horizon)?,
            TableSpec::Rows(rows) => {
                if rows.len() != self.num_intents || rows.iter().any(|r| r.len() != self.num_attributes) {
                    return Err(invalid(
                        "env.table",
                        &format_table(&self.table),
                        "table must have env.M rows of env.K bits",
                    ));
                }
                HiddenIntentTask::from_rows(rows.clone(), self.noise, horizon)?
            }
        };
        Ok(task)
    }

    pub fn advantage(&self) -> AdvantageConfig {
        AdvantageConfig {
            gate: GateConfig {
                temperature: self.gate_temperature,
                beta: self.beta,
            },
            epsilon: self.epsilon,
            variant: self.ablation,
            pooling: self.info_pooling,
        }
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            seed: self.rollout_seed.unwrap_or(self.seed),
            trainer: self.trainer,
            rollout: RolloutConfig {
                group_size: self.group_size,
                seed: self.rollout_seed.unwrap_or(self.seed),
                shared_intent: self.shared_intent,
            },
            advantage: self.advantage(),
            infogain: InfoGainSettings {
                mode: self.infogain_mode,
                mask: self.mask,
            },
        }
    }

    /// Checks every value before any work starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |ok: bool, key: &str, value: String, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(invalid(key, &value, reason))
            }
        };
        self.task()?;
        check(self.group_size >= 2, "rollout.group_size", self.group_size.to_string(), "must be at least 2")?;
        check(
            self.gate_temperature > 0.0,
            "advantage.gate_temperature",
            self.gate_temperature.to_string(),
            "must be positive",
        )?;
        check(self.epsilon > 0.0, "advantage.epsilon", self.epsilon.to_string(), "must be positive")?;
        check(self.beta.is_finite(), "advantage.beta", self.beta.to_string(), "must be finite")?;
        self.trainer
            .validate()
            .map_err(|e| invalid("trainer.*", "", &e.to_string()))?;
        check(
            self.mask_strategies.len() >= 2,
            "diagnostics.mask_strategies",
            self.mask_strategies.len().to_string(),
            "need at least two strategies",
        )?;
        check(
            self.initial_phase > 0.0 && self.initial_phase <= 1.0,
            "diagnostics.initial_phase",
            self.initial_phase.to_string(),
            "must lie in (0, 1]",
        )?;
        check(
            self.heatmap_buckets >= 1,
            "diagnostics.heatmap_buckets",
            self.heatmap_buckets.to_string(),
            "must be at least 1",
        )?;
        check(
            self.theory_tolerance > 0.0,
            "theory.tolerance",
            self.theory_tolerance.to_string(),
            "must be positive",
        )?;
        Ok(())
    }
}
