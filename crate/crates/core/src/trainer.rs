//! The training loop: roll out groups from a frozen snapshot, score turns,
//! build advantages, and take clipped-surrogate steps with an exact KL penalty
//! towards the initial policy.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advantage::{build_advantages, contribution_ratio, AdvantageConfig, AdvantageError, AdvantageTensor, Variant};
use crate::domain::{RolloutGroup, Trajectory};
use crate::env::HiddenIntentTask;
use crate::infogain::{
    info_gain_exact_marginal, info_gain_per_turn, InfoGainError, InfoGainMode, InfoGainTable, MaskSpec, MaskStrategy,
};
use crate::policy::{ContextState, PolicyError, PolicyParams, PolicySnapshot, PolicySpace};
use crate::rollout::{mix_seed, rollout_group, run_episode, seeded_rng, RolloutConfig, RolloutError, RolloutOutput};

/// Stream tags for `mix_seed`, kept distinct from rollout group ids.
const INIT_STREAM: u64 = 0x1417;
const MASK_STREAM: u64 = 0x3A5C;
const EVAL_STREAM: u64 = 0xE7A1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("loss is not finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("probability ratio is not finite (old log-prob {old_log_prob})")]
    NonFiniteRatio { old_log_prob: f64 },
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    InfoGain(#[from] InfoGainError),
    #[error(transparent)]
    Advantage(#[from] AdvantageError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub inner_epochs: usize,
    pub groups_per_iter: usize,
    pub optimizer: Optimizer,
    /// Half-width of the uniform weight initialisation.
    pub init_scale: f64,
    /// Evaluate every N iterations (0 disables periodic evaluation).
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            kl_coef: 0.001,
            learning_rate: 1.0,
            iterations: 300,
            inner_epochs: 1,
            groups_per_iter: 1,
            optimizer: Optimizer::Sgd,
            init_scale: 0.1,
            eval_every: 10,
            eval_episodes: 200,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(self.kl_coef >= 0.0) {
            return bad("kl_coef must be non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.inner_epochs == 0 || self.groups_per_iter == 0 {
            return bad("inner_epochs and groups_per_iter must be at least 1");
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoGainSettings {
    pub mode: InfoGainMode,
    pub mask: MaskStrategy,
}

impl Default for InfoGainSettings {
    fn default() -> Self {
        Self {
            mode: InfoGainMode::Placeholder,
            mask: MaskStrategy::FixedMaskToken,
        }
    }
}

/// Everything the loop needs besides the task itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub seed: u64,
    pub trainer: TrainerConfig,
    pub rollout: RolloutConfig,
    pub advantage: AdvantageConfig,
    pub infogain: InfoGainSettings,
}

impl Default for TrainSetup {
    fn default() -> Self {
        Self {
            seed: 0,
            trainer: TrainerConfig::default(),
            rollout: RolloutConfig::default(),
            advantage: AdvantageConfig::default(),
            infogain: InfoGainSettings::default(),
        }
    }
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: usize,
    pub mean_ext_reward: f64,
    pub success_rate: f64,
    pub zero_variance_flags: Vec<bool>,
    pub gate_values: Vec<f64>,
    /// Mean valid-turn info gain by turn position (index 0 is turn 1).
    pub per_turn_info_gain: Vec<Option<f64>>,
    pub per_turn_valid_counts: Vec<usize>,
    pub info_contribution_ratio: f64,
    pub grad_norm: f64,
    pub mean_kl: f64,
    pub loss: f64,
    pub mean_turns: f64,
    pub mean_action_length: f64,
    pub num_valid_turns: usize,
    pub episode_turns: Vec<usize>,
    pub episode_action_lengths: Vec<f64>,
    pub episode_rewards: Vec<f64>,
    pub eval_success: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub mean_kl: f64,
    /// Fraction of action tokens whose clipped branch was selected.
    pub clip_fraction: f64,
}

fn ctx_for_turn(task: &HiddenIntentTask, traj: &Trajectory, pos: usize) -> ContextState {
    ContextState::after_turns(task, &traj.turns()[..pos])
}

/// Clipped surrogate loss and its exact gradient over a batch of groups.
///
/// Each trajectory contributes `1/|tau_i|` times the sum over its action
/// tokens, and trajectories are averaged. The KL term is the mean exact
/// `KL(pi || pi_ref)` over the distinct contexts at which action tokens were
/// produced.
pub fn surrogate_loss(
    task: &HiddenIntentTask,
    batch: &[(&RolloutGroup, &AdvantageTensor)],
    params: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    clip_eps: f64,
    kl_coef: f64,
) -> Result<LossOutput, TrainError> {
    let n_traj: usize = batch.iter().map(|(g, _)| g.len()).sum();
    let mut grad = vec![0.0; params.space().num_weights()];
    let mut policy_term = 0.0;
    let mut clipped = 0usize;
    let mut n_tokens = 0usize;
    let mut visited: BTreeMap<usize, ContextState> = BTreeMap::new();
    let space = params.space();

    for (group, adv) in batch {
        for (i, traj) in group.trajectories().iter().enumerate() {
            let a_hat = &adv.a_hat[i];
            let weight = 1.0 / (n_traj as f64 * traj.num_action_tokens() as f64);
            let mut offset = 0;
            for (pos, turn) in traj.turns().iter().enumerate() {
                let ctx = ctx_for_turn(task, traj, pos);
                let tokens = &turn.action_tokens;
                let lp = params.action_log_prob(&ctx, tokens)?;
                let lp_old = old.action_log_prob(&ctx, tokens)?;
                let mut scales = vec![0.0; tokens.len()];
                for k in 0..tokens.len() {
                    if !lp_old[k].is_finite() {
                        return Err(TrainError::NonFiniteRatio { old_log_prob: lp_old[k] });
                    }
                    let a = a_hat[offset + k];
                    let rho = (lp[k] - lp_old[k]).exp();
                    let clipped_rho = rho.clamp(1.0 - clip_eps, 1.0 + clip_eps);
                    let unclipped = rho * a;
                    let clipped_val = clipped_rho * a;
                    n_tokens += 1;
                    if clipped_val < unclipped {
                        clipped += 1;
                        policy_term += weight * clipped_val;
                    } else {
                        policy_term += weight * unclipped;
                        // d(-w rho A)/d theta = -w A rho grad log pi
                        scales[k] = -weight * a * rho;
                    }
                }
                params.accumulate_token_grads(&ctx, tokens, &scales, &mut grad)?;
                for c in params.token_contexts(&ctx, tokens)? {
                    visited.entry(space.state_index(&c)).or_insert(c);
                }
                offset += tokens.len() + turn.observation_tokens.as_ref().map_or(0, Vec::len);
            }
        }
    }

    let mut mean_kl = 0.0;
    if !visited.is_empty() {
        let scale = 1.0 / visited.len() as f64;
        for c in visited.values() {
            mean_kl += scale * params.exact_kl(reference, c);
            if kl_coef > 0.0 {
                params.accumulate_kl_grad(reference, c, kl_coef * scale, &mut grad);
            }
        }
    }
    Ok(LossOutput {
        loss: -policy_term + kl_coef * mean_kl,
        grad,
        mean_kl,
        clip_fraction: if n_tokens == 0 { 0.0 } else { clipped as f64 / n_tokens as f64 },
    })
}

#[derive(Debug, Clone)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Descent direction for the given loss gradient.
    fn direction(&mut self, grad: &[f64]) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        grad.iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(&g, (m, v))| {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                -(*m / c1) / ((*v / c2).sqrt() + Self::EPS)
            })
            .collect()
    }
}

/// Scored rollout group ready for the update.
#[derive(Debug, Clone)]
pub struct ScoredGroup {
    pub rollout: RolloutOutput,
    pub info: InfoGainTable,
    pub advantages: AdvantageTensor,
}

pub fn score_group(
    task: &HiddenIntentTask,
    rollout: &RolloutOutput,
    params: &PolicyParams,
    mask: &MaskSpec,
    mode: InfoGainMode,
) -> Result<InfoGainTable, InfoGainError> {
    let rows = rollout
        .group
        .trajectories()
        .iter()
        .zip(&rollout.flags)
        .enumerate()
        .map(|(member, (traj, flags))| match mode {
            InfoGainMode::Placeholder => info_gain_per_turn(
                task,
                traj,
                params,
                mask,
                flags,
                mix_seed(&[rollout.group.group_id, member as u64]),
            ),
            InfoGainMode::ExactMarginal => info_gain_exact_marginal(task, traj, params, flags),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(InfoGainTable::new(mode, rows))
}

pub struct Trainer {
    task: HiddenIntentTask,
    setup: TrainSetup,
    params: PolicyParams,
    reference: PolicySnapshot,
    mask: MaskSpec,
    adam: Option<AdamState>,
    iteration: usize,
}

impl Trainer {
    /// Starts from uniformly random weights drawn from the setup seed.
    pub fn new(task: HiddenIntentTask, setup: TrainSetup) -> Result<Self, TrainError> {
        let params = PolicyParams::random(
            PolicySpace::for_task(&task),
            setup.trainer.init_scale,
            &mut seeded_rng(&[setup.seed, INIT_STREAM]),
        );
        Self::with_params(task, setup, params)
    }

    pub fn with_params(task: HiddenIntentTask, setup: TrainSetup, params: PolicyParams) -> Result<Self, TrainError> {
        setup.trainer.validate()?;
        if *params.space() != PolicySpace::for_task(&task) {
            return Err(RolloutError::ShapeMismatch.into());
        }
        let mask = MaskSpec::new(setup.infogain.mask, task.vocab(), mix_seed(&[setup.seed, MASK_STREAM]));
        let adam = (setup.trainer.optimizer == Optimizer::Adam).then(|| AdamState::new(params.weights().len()));
        Ok(Self {
            reference: params.snapshot(),
            task,
            setup,
            params,
            mask,
            adam,
            iteration: 0,
        })
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn reference(&self) -> &PolicyParams {
        &self.reference
    }

    pub fn task(&self) -> &HiddenIntentTask {
        &self.task
    }

    pub fn setup(&self) -> &TrainSetup {
        &self.setup
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.setup.trainer.iterations
    }

    /// Rolls out and scores the groups of the current iteration without updating.
    pub fn collect(&self, params: &PolicyParams) -> Result<Vec<ScoredGroup>, TrainError> {
        let gpi = self.setup.trainer.groups_per_iter;
        let rollout_cfg = RolloutConfig {
            seed: self.setup.seed,
            ..self.setup.rollout
        };
        (0..gpi)
            .into_par_iter()
            .map(|g| {
                let group_id = (self.iteration * gpi + g) as u64;
                let rollout = rollout_group(&self.task, params, &rollout_cfg, group_id)?;
                let info = score_group(&self.task, &rollout, params, &self.mask, self.setup.infogain.mode)?;
                let advantages = build_advantages(&rollout.group, &info, &self.setup.advantage)?;
                Ok(ScoredGroup {
                    rollout,
                    info,
                    advantages,
                })
            })
            .collect()
    }

    /// One full iteration: rollout, scoring, advantage, update, report.
    pub fn step(&mut self) -> Result<StepReport, TrainError> {
        let old = self.params.snapshot();
        let groups = self.collect(&old)?;
        let batch: Vec<(&RolloutGroup, &AdvantageTensor)> =
            groups.iter().map(|g| (&g.rollout.group, &g.advantages)).collect();
        let cfg = self.setup.trainer;

        let mut first: Option<LossOutput> = None;
        for _ in 0..cfg.inner_epochs {
            let out = surrogate_loss(
                &self.task,
                &batch,
                &self.params,
                &old,
                &self.reference,
                cfg.clip_eps,
                cfg.kl_coef,
            )?;
            if !out.loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    iteration: self.iteration,
                });
            }
            let direction = match &mut self.adam {
                Some(adam) => adam.direction(&out.grad),
                None => out.grad.iter().map(|g| -g).collect(),
            };
            self.params.apply_step(&direction, cfg.learning_rate)?;
            if first.is_none() {
                first = Some(out);
            }
        }
        let first = first.expect("inner_epochs >= 1");
        let report = self.report(&groups, &first);
        self.iteration += 1;
        let eval_success = if cfg.eval_every > 0 && (self.iteration % cfg.eval_every == 0 || self.is_done()) {
            Some(self.evaluate(cfg.eval_episodes, self.iteration as u64)?)
        } else {
            None
        };
        Ok(StepReport { eval_success, ..report })
    }

    fn report(&self, groups: &[ScoredGroup], loss: &LossOutput) -> StepReport {
        let horizon = self.task.horizon;
        let mut turn_sums = vec![(0.0, 0usize); horizon];
        let mut episode_turns = Vec::new();
        let mut episode_action_lengths = Vec::new();
        let mut episode_rewards = Vec::new();
        let mut num_valid_turns = 0;
        for g in groups {
            for (traj, row) in g.rollout.group.trajectories().iter().zip(&g.info.rows) {
                for (p, e) in row.iter().enumerate() {
                    if e.valid && p < horizon {
                        turn_sums[p].0 += e.value;
                        turn_sums[p].1 += 1;
                        num_valid_turns += 1;
                    }
                }
                episode_turns.push(traj.num_turns());
                episode_action_lengths.push(traj.mean_action_length());
            }
            episode_rewards.extend_from_slice(g.rollout.group.ext_scores());
        }
        let n = episode_rewards.len() as f64;
        let mean_reward = episode_rewards.iter().sum::<f64>() / n;
        let effective_beta = match self.setup.advantage.variant {
            Variant::Grpo => 0.0,
            _ => self.setup.advantage.gate.beta,
        };
        let pairs: Vec<_> = groups.iter().map(|g| (&g.rollout.group, &g.advantages)).collect();
        StepReport {
            iteration: self.iteration,
            mean_ext_reward: mean_reward,
            success_rate: episode_rewards.iter().filter(|&&r| r == 1.0).count() as f64 / n,
            zero_variance_flags: groups.iter().map(|g| g.advantages.stats.sigma_ext == 0.0).collect(),
            gate_values: groups.iter().map(|g| g.advantages.gate_value).collect(),
            per_turn_info_gain: turn_sums
                .iter()
                .map(|&(s, c)| (c > 0).then(|| s / c as f64))
                .collect(),
            per_turn_valid_counts: turn_sums.iter().map(|&(_, c)| c).collect(),
            info_contribution_ratio: contribution_ratio(&pairs, effective_beta),
            grad_norm: loss.grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
            mean_kl: loss.mean_kl,
            loss: loss.loss,
            mean_turns: episode_turns.iter().sum::<usize>() as f64 / n,
            mean_action_length: episode_action_lengths.iter().sum::<f64>() / n,
            num_valid_turns,
            episode_turns,
            episode_action_lengths,
            episode_rewards,
            eval_success: None,
        }
    }

    /// Success rate of the current sampled policy over fresh episodes.
    pub fn evaluate(&self, episodes: usize, key: u64) -> Result<f64, TrainError> {
        evaluate_policy(&self.task, &self.params, episodes, &[self.setup.seed, EVAL_STREAM, key])
    }
}

/// Success rate over `episodes` episodes with uniformly drawn intents.
pub fn evaluate_policy(
    task: &HiddenIntentTask,
    params: &PolicyParams,
    episodes: usize,
    key: &[u64],
) -> Result<f64, TrainError> {
    if episodes == 0 {
        return Ok(0.0);
    }
    let rewards: Vec<f64> = (0..episodes as u64)
        .into_par_iter()
        .map(|e| {
            let mut parts = key.to_vec();
            parts.push(e);
            let mut rng = seeded_rng(&parts);
            let intent = rand::Rng::gen_range(&mut rng, 0..task.num_intents);
            run_episode(task, params, intent, "eval", &mut rng).map(|ep| ep.reward)
        })
        .collect::<Result<_, _>>()?;
    Ok(rewards.iter().sum::<f64>() / episodes as f64)
}

/// Runs the configured number of iterations and returns the log and final policy.
pub fn train(task: HiddenIntentTask, setup: TrainSetup) -> Result<(Vec<StepReport>, PolicyParams), TrainError> {
    let mut trainer = Trainer::new(task, setup)?;
    let mut log = Vec::with_capacity(setup.trainer.iterations);
    while !trainer.is_done() {
        log.push(trainer.step()?);
    }
    Ok((log, trainer.params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::advantage::GateConfig;
    use crate::domain::{GroupStats, Token, TurnRecord, DEFAULT_EPSILON};
    use crate::env::{ActionSpec, Verb};

    fn micro() -> HiddenIntentTask {
        HiddenIntentTask::binary(2, 1, 0.0, 2).unwrap()
    }

    fn stats() -> GroupStats {
        GroupStats {
            mu_ext: 0.0,
            sigma_ext: 0.0,
            mu_info: 0.0,
            sigma_info: 0.0,
            epsilon: DEFAULT_EPSILON,
        }
    }

    fn tensor_for(group: &RolloutGroup, values: &[f64]) -> AdvantageTensor {
        let a_hat: Vec<Vec<f64>> = group
            .trajectories()
            .iter()
            .zip(values)
            .map(|(t, &v)| t.response_mask().iter().map(|&m| if m == 1 { v } else { 0.0 }).collect())
            .collect();
        AdvantageTensor {
            a_ext: a_hat.clone(),
            a_info: a_hat.iter().map(|r| vec![0.0; r.len()]).collect(),
            a_hat,
            gate_value: 0.5,
            stats: stats(),
        }
    }

    fn two_episode_group(task: &HiddenIntentTask) -> RolloutGroup {
        let v = task.vocab();
        let q = task.encode_action(ActionSpec::query(0)).unwrap().to_vec();
        let a1 = task.encode_action(ActionSpec::answer(1)).unwrap().to_vec();
        let a0 = task.encode_action(ActionSpec::answer(0)).unwrap().to_vec();
        let t1 = Trajectory::new(
            "x",
            vec![
                TurnRecord::new(1, q.clone(), Some(vec![v.bit(true)])),
                TurnRecord::new(2, a1, None),
            ],
            true,
        )
        .unwrap();
        let t2 = Trajectory::new("x", vec![TurnRecord::new(1, a0, None)], true).unwrap();
        RolloutGroup::new(0, vec![t1, t2], vec![1.0, 0.0]).unwrap()
    }

    #[test]
    fn identity_ratio_gives_mean_advantage() {
        let task = micro();
        let p = PolicyParams::random(PolicySpace::for_task(&task), 0.5, &mut seeded_rng(&[3]));
        let g = two_episode_group(&task);
        let adv = tensor_for(&g, &[0.7, -0.4]);
        let out = surrogate_loss(&task, &[(&g, &adv)], &p, &p, &p, 0.2, 0.001).unwrap();
        // per-trajectory token mean of A_hat, then mean over trajectories
        assert!((out.loss - -(0.7 - 0.4) / 2.0).abs() < 1e-15);
        assert_eq!(out.mean_kl, 0.0);
        assert_eq!(out.clip_fraction, 0.0);
    }

    #[test]
    fn identity_ratio_gradient_is_policy_gradient() {
        let task = micro();
        let p = PolicyParams::random(PolicySpace::for_task(&task), 0.5, &mut seeded_rng(&[4]));
        let g = two_episode_group(&task);
        let adv = tensor_for(&g, &[0.7, -0.4]);
        let out = surrogate_loss(&task, &[(&g, &adv)], &p, &p, &p, 0.2, 0.0).unwrap();
        let mut expected = vec![0.0; p.weights().len()];
        for (traj, a) in g.trajectories().iter().zip([0.7, -0.4]) {
            let w = 1.0 / (2.0 * traj.num_action_tokens() as f64);
            for (pos, turn) in traj.turns().iter().enumerate() {
                let ctx = ctx_for_turn(&task, traj, pos);
                p.accumulate_grad_log_prob(&ctx, &turn.action_tokens, -w * a, &mut expected)
                    .unwrap();
            }
        }
        for (x, y) in out.grad.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn null_signal_has_zero_loss_and_gradient() {
        let task = micro();
        let p = PolicyParams::random(PolicySpace::for_task(&task), 0.5, &mut seeded_rng(&[5]));
        let g = two_episode_group(&task);
        let adv = tensor_for(&g, &[0.0, 0.0]);
        let out = surrogate_loss(&task, &[(&g, &adv)], &p, &p, &p, 0.2, 0.5).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn clipped_branch_selected_above_one_plus_eps() {
        // verb token: old 0.5, new 0.75 -> rho 1.5; the single-argument token has rho 1
        let task = micro();
        let space = PolicySpace::for_task(&task);
        let old = PolicyParams::zeros(space);
        let mut new = PolicyParams::zeros(space);
        let ctx = ContextState::after_turns(&task, &[]);
        let i = new.weight_index(&ctx, task.vocab().verb(Verb::Query));
        new.set_weight(i, 3f64.ln()).unwrap();
        let q = task.encode_action(ActionSpec::query(0)).unwrap().to_vec();
        let traj = Trajectory::new("x", vec![TurnRecord::new(1, q, Some(vec![Token(4)]))], true).unwrap();
        let g = RolloutGroup::new(0, vec![traj.clone(), traj], vec![0.0, 0.0]).unwrap();
        let adv = tensor_for(&g, &[1.0, 1.0]);
        let out = surrogate_loss(&task, &[(&g, &adv)], &new, &old, &old, 0.2, 0.0).unwrap();
        // min(1.5, 1.2) = 1.2 on the verb token, 1.0 on the argument token
        assert!((out.loss - -(1.2 + 1.0) / 2.0).abs() < 1e-12);
        assert_eq!(out.clip_fraction, 0.5);
        // clipped token passes no gradient; the argument token has one legal choice
        assert!(out.grad.iter().all(|&x| x.abs() < 1e-15));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let task = micro();
        let space = PolicySpace::for_task(&task);
        let mut rng = seeded_rng(&[9]);
        let old = PolicyParams::random(space, 0.5, &mut rng);
        let reference = PolicyParams::random(space, 0.5, &mut rng);
        // close to old so no token sits on a clip boundary
        let noise = PolicyParams::random(space, 0.05, &mut rng);
        let mut params = old.clone();
        params.apply_step(noise.weights(), 1.0).unwrap();
        let g = two_episode_group(&task);
        let adv = tensor_for(&g, &[0.9, -1.3]);
        let out = surrogate_loss(&task, &[(&g, &adv)], &params, &old, &reference, 0.2, 0.3).unwrap();
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for i in 0..params.weights().len() {
            let mut plus = params.clone();
            plus.set_weight(i, params.weights()[i] + h).unwrap();
            let mut minus = params.clone();
            minus.set_weight(i, params.weights()[i] - h).unwrap();
            let lp = surrogate_loss(&task, &[(&g, &adv)], &plus, &old, &reference, 0.2, 0.3).unwrap().loss;
            let lm = surrogate_loss(&task, &[(&g, &adv)], &minus, &old, &reference, 0.2, 0.3).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let a = out.grad[i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max((a - fd).abs() / denom);
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn kl_term_zero_at_init_and_nonnegative() {
        let task = micro();
        let setup = TrainSetup {
            trainer: TrainerConfig {
                iterations: 3,
                groups_per_iter: 2,
                eval_every: 0,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut t = Trainer::new(task, setup).unwrap();
        let r0 = t.step().unwrap();
        assert_eq!(r0.mean_kl, 0.0);
        for _ in 0..2 {
            assert!(t.step().unwrap().mean_kl >= 0.0);
        }
    }

    #[test]
    fn deterministic_replay() {
        let task = HiddenIntentTask::binary(4, 2, 0.1, 3).unwrap();
        let setup = TrainSetup {
            seed: 17,
            trainer: TrainerConfig {
                iterations: 5,
                groups_per_iter: 4,
                eval_every: 2,
                eval_episodes: 20,
                ..Default::default()
            },
            ..Default::default()
        };
        let (a, pa) = train(task.clone(), setup).unwrap();
        let (b, pb) = train(task, setup).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(pa.weights(), pb.weights());
        assert_eq!(a.len(), 5);
        assert!(a[1].eval_success.is_some() && a[0].eval_success.is_none());
        assert!(a[4].eval_success.is_some());
    }

    #[test]
    fn beta_zero_matches_grpo_bit_for_bit() {
        let task = HiddenIntentTask::binary(4, 2, 0.0, 3).unwrap();
        let base = TrainSetup {
            seed: 2,
            trainer: TrainerConfig {
                iterations: 4,
                groups_per_iter: 3,
                eval_every: 2,
                eval_episodes: 10,
                ..Default::default()
            },
            ..Default::default()
        };
        let beta0 = TrainSetup {
            advantage: AdvantageConfig {
                gate: GateConfig { beta: 0.0, ..base.advantage.gate },
                ..base.advantage
            },
            ..base
        };
        let grpo = TrainSetup {
            advantage: AdvantageConfig {
                variant: Variant::Grpo,
                ..base.advantage
            },
            ..base
        };
        let (a, _) = train(task.clone(), beta0).unwrap();
        let (b, _) = train(task, grpo).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn rejects_bad_config() {
        let task = micro();
        for trainer in [
            TrainerConfig {
                clip_eps: 1.0,
                ..Default::default()
            },
            TrainerConfig {
                kl_coef: -1.0,
                ..Default::default()
            },
            TrainerConfig {
                inner_epochs: 0,
                ..Default::default()
            },
        ] {
            let setup = TrainSetup {
                trainer,
                ..Default::default()
            };
            assert!(matches!(Trainer::new(task.clone(), setup), Err(TrainError::Config(_))));
        }
    }

    #[test]
    fn inner_epochs_take_multiple_steps() {
        let task = micro();
        let setup = TrainSetup {
            trainer: TrainerConfig {
                iterations: 1,
                inner_epochs: 3,
                groups_per_iter: 2,
                eval_every: 0,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut t = Trainer::new(task, setup).unwrap();
        t.step().unwrap();
        assert_eq!(t.params().version(), 3);
    }
}
