//! Exact information quantities by enumeration, and verifiers for the two
//! information-theoretic properties of the info-gain reward:
//!
//! * the expected exact-marginal reward at turn `t` equals `I(O_t; A_{t+1} | H_t)`;
//! * accumulated information must exceed the Fano bound
//!   `log M - h(delta) - delta log(M - 1)` for success probability `1 - delta`.
//!
//! The conditional mutual information is computed on a tree of visible
//! histories that carries one weight per hidden intent. The expected reward is
//! computed independently, by enumerating complete trajectories and scoring
//! each with the exact-marginal reward.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Token, TurnRecord};
use crate::env::{enumerate_trajectories, EnvError, HiddenIntentTask, Verb, MAX_ENUMERATION_LEAVES};
use crate::infogain::{info_gain_exact_marginal_with, InfoGainError, MarginalCorruption};
use crate::policy::{ContextState, PolicyParams, PolicySpace};
use crate::rollout::valid_turn_flags;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("history tree exceeds {0} nodes")]
    TreeTooLarge(usize),
    #[error("policy was built for a different task shape")]
    ShapeMismatch,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    InfoGain(#[from] InfoGainError),
}

/// Exact information quantities for one `(task, policy)` pair, in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiResult {
    /// `per_turn_mi[t - 1] = I(O_t; A_{t+1} | H_t)`.
    pub per_turn_mi: Vec<f64>,
    /// Sum of `per_turn_mi`.
    pub directed_info: f64,
    /// `per_turn_info_gain[t - 1] = E[r_info_t]` in exact-marginal mode.
    pub per_turn_info_gain: Vec<f64>,
    pub expected_info_gain: f64,
    pub success_prob: f64,
    /// Probability of reaching the horizon without answering.
    pub timeout_prob: f64,
    /// `I(Z; A^T)`: information the whole action transcript carries about the intent.
    pub action_mi: f64,
    /// `I(Z; Z_hat)` with a timeout counted as its own outcome.
    pub answer_mi: f64,
}

fn xlogy_ratio(p: f64, q: f64) -> f64 {
    if p > 0.0 {
        p * (p / q).ln()
    } else {
        0.0
    }
}

/// Mutual information of a joint table given as rows over outcomes with
/// one column per intent.
fn joint_mi(rows: &BTreeMap<Vec<Token>, Vec<f64>>, num_intents: usize) -> f64 {
    let mut pz = vec![0.0; num_intents];
    for row in rows.values() {
        for (z, p) in row.iter().enumerate() {
            pz[z] += p;
        }
    }
    let mut mi = 0.0;
    for row in rows.values() {
        let pa: f64 = row.iter().sum();
        for (z, &p) in row.iter().enumerate() {
            if p > 0.0 {
                mi += p * (p / (pa * pz[z])).ln();
            }
        }
    }
    mi.max(0.0)
}

struct TreeWalk<'a> {
    task: &'a HiddenIntentTask,
    policy: &'a PolicyParams,
    per_turn_mi: Vec<f64>,
    success: f64,
    timeout: f64,
    by_actions: BTreeMap<Vec<Token>, Vec<f64>>,
    by_answer: BTreeMap<Vec<Token>, Vec<f64>>,
    nodes: usize,
    max_nodes: usize,
}

impl TreeWalk<'_> {
    fn add_leaf(&mut self, turns: &[TurnRecord], last_action: &[Token], answer: Option<Token>, w: &[f64]) {
        let mut actions: Vec<Token> = turns.iter().flat_map(|t| t.action_tokens.iter().copied()).collect();
        actions.extend_from_slice(last_action);
        let answer_key = answer.map_or_else(Vec::new, |a| vec![a]);
        for (key, table) in [(actions, &mut self.by_actions), (answer_key, &mut self.by_answer)] {
            let row = table.entry(key).or_insert_with(|| vec![0.0; w.len()]);
            for (r, x) in row.iter_mut().zip(w) {
                *r += x;
            }
        }
    }

    /// `weights[z] = P(Z = z, visible history so far)`.
    fn visit(&mut self, turns: &mut Vec<TurnRecord>, weights: &[f64]) -> Result<(), TheoryError> {
        self.nodes += 1;
        if self.nodes > self.max_nodes {
            return Err(TheoryError::TreeTooLarge(self.max_nodes));
        }
        let task = self.task;
        let vocab = task.vocab();
        let ctx = ContextState::after_turns(task, turns);
        for (action, p) in self.policy.action_distribution(&ctx) {
            if p == 0.0 {
                continue;
            }
            let w: Vec<f64> = weights.iter().map(|x| x * p).collect();
            let tokens = task.encode_action(action)?.to_vec();
            match action.verb {
                Verb::Answer => {
                    self.success += w[action.argument];
                    self.add_leaf(turns, &tokens, Some(tokens[1]), &w);
                }
                Verb::Query => {
                    let t = turns.len() + 1;
                    let children: Vec<(bool, Vec<f64>)> = [false, true]
                        .into_iter()
                        .map(|bit| {
                            let wo = w
                                .iter()
                                .enumerate()
                                .map(|(z, x)| x * task.likelihood(z, action.argument, bit))
                                .collect();
                            (bit, wo)
                        })
                        .collect();
                    if t >= task.horizon {
                        self.timeout += w.iter().sum::<f64>();
                        self.add_leaf(turns, &tokens, None, &w);
                        continue;
                    }
                    let p_h: f64 = w.iter().sum();
                    let mut branches = Vec::new();
                    for (bit, wo) in &children {
                        let p_o: f64 = wo.iter().sum();
                        if p_o == 0.0 {
                            continue;
                        }
                        turns.push(TurnRecord::new(t, tokens.clone(), Some(vec![vocab.bit(*bit)])));
                        let next = self.policy.action_distribution(&ContextState::after_turns(task, turns));
                        turns.pop();
                        branches.push((p_o, next));
                    }
                    // mixture over observations of the next-action law
                    let n_actions = branches[0].1.len();
                    let marginal: Vec<f64> = (0..n_actions)
                        .map(|a| branches.iter().map(|(p_o, d)| p_o / p_h * d[a].1).sum())
                        .collect();
                    let mi: f64 = branches
                        .iter()
                        .map(|(p_o, d)| p_o * d.iter().zip(&marginal).map(|((_, pa), m)| xlogy_ratio(*pa, *m)).sum::<f64>())
                        .sum();
                    self.per_turn_mi[t - 1] += mi;
                    for (bit, wo) in children {
                        if wo.iter().sum::<f64>() == 0.0 {
                            continue;
                        }
                        turns.push(TurnRecord::new(t, tokens.clone(), Some(vec![vocab.bit(bit)])));
                        let r = self.visit(turns, &wo);
                        turns.pop();
                        r?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_shape(task: &HiddenIntentTask, policy: &PolicyParams) -> Result<(), TheoryError> {
    if *policy.space() != PolicySpace::for_task(task) {
        return Err(TheoryError::ShapeMismatch);
    }
    Ok(())
}

/// Tree-side quantities: per-turn CMI, success probability and the two
/// transcript mutual informations.
fn history_tree(task: &HiddenIntentTask, policy: &PolicyParams, max_nodes: usize) -> Result<MiResult, TheoryError> {
    check_shape(task, policy)?;
    let mut walk = TreeWalk {
        task,
        policy,
        per_turn_mi: vec![0.0; task.horizon],
        success: 0.0,
        timeout: 0.0,
        by_actions: BTreeMap::new(),
        by_answer: BTreeMap::new(),
        nodes: 0,
        max_nodes,
    };
    let prior = vec![1.0 / task.num_intents as f64; task.num_intents];
    walk.visit(&mut Vec::new(), &prior)?;
    let per_turn_mi: Vec<f64> = walk.per_turn_mi.iter().map(|m| m.max(0.0)).collect();
    Ok(MiResult {
        directed_info: per_turn_mi.iter().sum(),
        per_turn_mi,
        per_turn_info_gain: vec![0.0; task.horizon],
        expected_info_gain: 0.0,
        success_prob: walk.success,
        timeout_prob: walk.timeout,
        action_mi: joint_mi(&walk.by_actions, task.num_intents),
        answer_mi: joint_mi(&walk.by_answer, task.num_intents),
    })
}

/// `E[r_info_t]` per turn by trajectory enumeration.
pub fn expected_info_gain(
    task: &HiddenIntentTask,
    policy: &PolicyParams,
    corruption: Option<MarginalCorruption>,
) -> Result<Vec<f64>, TheoryError> {
    check_shape(task, policy)?;
    let mut per_turn = vec![0.0; task.horizon];
    for wt in enumerate_trajectories(task, policy, MAX_ENUMERATION_LEAVES)? {
        let flags = valid_turn_flags(&wt.trajectory);
        let row = info_gain_exact_marginal_with(task, &wt.trajectory, policy, &flags, corruption)?;
        for (p, e) in row.iter().enumerate() {
            if e.valid {
                per_turn[p] += wt.probability * e.value;
            }
        }
    }
    Ok(per_turn)
}

pub fn conditional_mi(task: &HiddenIntentTask, policy: &PolicyParams) -> Result<MiResult, TheoryError> {
    let mut result = history_tree(task, policy, MAX_ENUMERATION_LEAVES)?;
    result.per_turn_info_gain = expected_info_gain(task, policy, None)?;
    result.expected_info_gain = result.per_turn_info_gain.iter().sum();
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub tolerance: f64,
    pub per_turn_mi: Vec<f64>,
    pub per_turn_info_gain: Vec<f64>,
    pub max_abs_error: f64,
    pub total_abs_error: f64,
    pub pass: bool,
    /// Error of the deliberately corrupted marginal; must exceed `tolerance`
    /// whenever the policy reacts to observations.
    pub negative_control_error: f64,
}

/// Size of the observation-law shift used by the negative control.
pub const NEGATIVE_CONTROL_SHIFT: f64 = 0.1;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn verify_theorem1(task: &HiddenIntentTask, policy: &PolicyParams, tol: f64) -> Result<Theorem1Report, TheoryError> {
    let mi = conditional_mi(task, policy)?;
    let max_abs_error = max_abs_diff(&mi.per_turn_mi, &mi.per_turn_info_gain);
    let total_abs_error = (mi.directed_info - mi.expected_info_gain).abs();
    let corrupted = expected_info_gain(
        task,
        policy,
        Some(MarginalCorruption {
            shift: NEGATIVE_CONTROL_SHIFT,
        }),
    )?;
    Ok(Theorem1Report {
        tolerance: tol,
        pass: max_abs_error <= tol && total_abs_error <= tol,
        max_abs_error,
        total_abs_error,
        negative_control_error: max_abs_diff(&mi.per_turn_mi, &corrupted),
        per_turn_mi: mi.per_turn_mi,
        per_turn_info_gain: mi.per_turn_info_gain,
    })
}

fn binary_entropy(p: f64) -> f64 {
    let term = |x: f64| if x > 0.0 { -x * x.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// `log M - h(delta) - delta log(M - 1)` in nats.
pub fn fano_bound(num_intents: usize, delta: f64) -> f64 {
    let m = num_intents as f64;
    let delta = delta.clamp(0.0, 1.0);
    m.ln() - binary_entropy(delta) - delta * (m - 1.0).ln()
}

/// Fano bound when the estimator may also output "no answer": a timeout
/// leaves `log M` of residual uncertainty instead of `log(M - 1)`.
pub fn fano_bound_with_timeouts(num_intents: usize, delta: f64, timeout_prob: f64) -> f64 {
    let m = num_intents as f64;
    let delta = delta.clamp(0.0, 1.0);
    let timeout = timeout_prob.clamp(0.0, delta);
    m.ln() - binary_entropy(delta) - (delta - timeout) * (m - 1.0).ln() - timeout * m.ln()
}

/// Slack allowed for floating-point error in the bound comparisons.
pub const FANO_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub num_intents: usize,
    pub success_prob: f64,
    pub delta: f64,
    pub timeout_prob: f64,
    pub bound: f64,
    /// Bound that accounts for the extra "no answer" outcome.
    pub timeout_aware_bound: f64,
    /// Sum over turns of `I(O_t; A_{t+1} | H_t)`.
    pub directed_info: f64,
    pub action_mi: f64,
    pub answer_mi: f64,
    /// `directed_info >= bound - slack`.
    pub pass: bool,
    /// `action_mi >= timeout_aware_bound - slack`.
    pub action_mi_pass: bool,
}

pub fn verify_theorem2(task: &HiddenIntentTask, policy: &PolicyParams) -> Result<Theorem2Report, TheoryError> {
    let mi = history_tree(task, policy, MAX_ENUMERATION_LEAVES)?;
    let delta = (1.0 - mi.success_prob).clamp(0.0, 1.0);
    let bound = fano_bound(task.num_intents, delta);
    let timeout_aware_bound = fano_bound_with_timeouts(task.num_intents, delta, mi.timeout_prob);
    Ok(Theorem2Report {
        num_intents: task.num_intents,
        success_prob: mi.success_prob,
        delta,
        timeout_prob: mi.timeout_prob,
        bound,
        timeout_aware_bound,
        directed_info: mi.directed_info,
        action_mi: mi.action_mi,
        answer_mi: mi.answer_mi,
        pass: mi.directed_info >= bound - FANO_SLACK,
        action_mi_pass: mi.action_mi >= timeout_aware_bound - FANO_SLACK,
    })
}
