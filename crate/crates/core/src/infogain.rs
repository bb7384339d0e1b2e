//! Turn-level counterfactual information gain.
//!
//! For a valid turn `t` the reward compares the realized next action `a_{t+1}`
//! under the factual context `(h_t, o_t)` with a counterfactual context in
//! which `o_t` is replaced by a placeholder. Both terms are teacher-forced on
//! the same tokens.
//!
//! Two modes:
//! * placeholder: mean per-token log-ratio against the masked context, the
//!   training signal;
//! * exact marginal: full-sequence log-ratio against the marginal policy
//!   `sum_o P(o | h_t) pi(a | h_t, o)`, whose expectation is the conditional
//!   mutual information `I(O_t; A_{t+1} | H_t)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Token, Trajectory};
use crate::env::{EnvError, HiddenIntentTask, Verb, Vocabulary, NUM_FILLER_TOKENS};
use crate::policy::{ContextState, ObsSlot, PolicyError, PolicyParams};
use crate::rollout::mix_seed;

#[derive(Debug, Error)]
pub enum InfoGainError {
    #[error("turn {0} is flagged valid but has no following action")]
    MissingNextAction(usize),
    #[error("flag row has {flags} entries for {turns} turns")]
    FlagCount { flags: usize, turns: usize },
    #[error("turn {0} is flagged valid but its action is not a query")]
    NotAQuery(usize),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Two-token analogue of "No information found."
    DefaultString,
    /// Two-token analogue of "Empty observation."
    AltString,
    /// One filler token, re-drawn for every evaluation.
    RandomTokens,
    /// The reserved MASK token, repeated to the observation length (1).
    FixedMaskToken,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 4] = [
        MaskStrategy::FixedMaskToken,
        MaskStrategy::DefaultString,
        MaskStrategy::AltString,
        MaskStrategy::RandomTokens,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::DefaultString => "default",
            MaskStrategy::AltString => "alt",
            MaskStrategy::RandomTokens => "random",
            MaskStrategy::FixedMaskToken => "fixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub strategy: MaskStrategy,
    pub placeholder_tokens: Vec<Token>,
    vocab: Vocabulary,
    seed: u64,
}

impl MaskSpec {
    pub fn new(strategy: MaskStrategy, vocab: Vocabulary, seed: u64) -> Self {
        let placeholder_tokens = match strategy {
            MaskStrategy::DefaultString => vocab.default_placeholder(),
            MaskStrategy::AltString => vocab.alt_placeholder(),
            MaskStrategy::RandomTokens => Vec::new(),
            MaskStrategy::FixedMaskToken => vec![vocab.mask()],
        };
        Self {
            strategy,
            placeholder_tokens,
            vocab,
            seed,
        }
    }

    /// Placeholder for one evaluation. Random tokens are keyed by
    /// `(seed, key, turn)` so results do not depend on evaluation order.
    pub fn placeholder(&self, key: u64, turn: usize) -> Vec<Token> {
        match self.strategy {
            MaskStrategy::RandomTokens => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, key, turn as u64]));
                vec![self.vocab.filler(rng.gen_range(0..NUM_FILLER_TOKENS))]
            }
            _ => self.placeholder_tokens.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoGainMode {
    Placeholder,
    ExactMarginal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoGainEntry {
    pub value: f64,
    pub valid: bool,
}

impl InfoGainEntry {
    const INVALID: Self = Self {
        value: 0.0,
        valid: false,
    };
}

/// Per-(trajectory, turn) info-gain values; `rows[i][p]` belongs to the `p`-th
/// turn of trajectory `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoGainTable {
    pub mode: InfoGainMode,
    pub rows: Vec<Vec<InfoGainEntry>>,
}

impl InfoGainTable {
    pub fn new(mode: InfoGainMode, rows: Vec<Vec<InfoGainEntry>>) -> Self {
        Self { mode, rows }
    }

    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().flatten().filter(|e| e.valid).map(|e| e.value)
    }

    pub fn num_valid(&self) -> usize {
        self.rows.iter().flatten().filter(|e| e.valid).count()
    }

    /// Teacher-forced forward calls needed to score the table in mini-batches
    /// of `batch` valid turns: two per batch (with and without the observation).
    pub fn forward_calls(&self, batch: usize) -> usize {
        2 * self.num_valid().div_ceil(batch.max(1))
    }
}

/// Sum of valid entries.
pub fn cumulative_info_gain(entries: &[InfoGainEntry]) -> f64 {
    entries.iter().filter(|e| e.valid).map(|e| e.value).sum()
}

fn check_flags(traj: &Trajectory, flags: &[bool]) -> Result<(), InfoGainError> {
    if flags.len() != traj.num_turns() {
        return Err(InfoGainError::FlagCount {
            flags: flags.len(),
            turns: traj.num_turns(),
        });
    }
    Ok(())
}

fn next_action(traj: &Trajectory, pos: usize) -> Result<&[Token], InfoGainError> {
    traj.turns()
        .get(pos + 1)
        .map(|t| t.action_tokens.as_slice())
        .ok_or(InfoGainError::MissingNextAction(traj.turns()[pos].turn_index))
}

/// Placeholder-mode reward for each turn of one trajectory.
pub fn info_gain_per_turn(
    task: &HiddenIntentTask,
    traj: &Trajectory,
    params: &PolicyParams,
    mask: &MaskSpec,
    flags: &[bool],
    eval_key: u64,
) -> Result<Vec<InfoGainEntry>, InfoGainError> {
    check_flags(traj, flags)?;
    let turns = traj.turns();
    let mut row = Vec::with_capacity(turns.len());
    for (pos, &valid) in flags.iter().enumerate() {
        if !valid {
            row.push(InfoGainEntry::INVALID);
            continue;
        }
        let next = next_action(traj, pos)?;
        let factual_ctx = ContextState::after_turns(task, &turns[..=pos]);
        let placeholder = mask.placeholder(eval_key, turns[pos].turn_index);
        let slot = placeholder.last().map_or(ObsSlot::Absent, |&t| ObsSlot::Token(t));
        let factual = params.action_log_prob(&factual_ctx, next)?;
        let counterfactual = params.action_log_prob(&factual_ctx.with_obs_slot(slot), next)?;
        let value = factual.iter().zip(&counterfactual).map(|(f, c)| f - c).sum::<f64>() / next.len() as f64;
        row.push(InfoGainEntry { value, valid: true });
    }
    Ok(row)
}

/// Perturbation applied to the observation law inside the marginal policy.
/// Used only as a negative control for the verifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalCorruption {
    pub shift: f64,
}

/// Exact-marginal (sequence-level, unaveraged) reward for each turn.
pub fn info_gain_exact_marginal(
    task: &HiddenIntentTask,
    traj: &Trajectory,
    params: &PolicyParams,
    flags: &[bool],
) -> Result<Vec<InfoGainEntry>, InfoGainError> {
    info_gain_exact_marginal_with(task, traj, params, flags, None)
}

pub fn info_gain_exact_marginal_with(
    task: &HiddenIntentTask,
    traj: &Trajectory,
    params: &PolicyParams,
    flags: &[bool],
    corruption: Option<MarginalCorruption>,
) -> Result<Vec<InfoGainEntry>, InfoGainError> {
    check_flags(traj, flags)?;
    let turns = traj.turns();
    let vocab = task.vocab();
    let mut row = Vec::with_capacity(turns.len());
    for (pos, &valid) in flags.iter().enumerate() {
        if !valid {
            row.push(InfoGainEntry::INVALID);
            continue;
        }
        let next = next_action(traj, pos)?;
        let action = task.decode_action(&turns[pos].action_tokens)?;
        if action.verb != Verb::Query {
            return Err(InfoGainError::NotAQuery(turns[pos].turn_index));
        }
        let history = task.history_from_turns(&turns[..pos])?;
        let mut pred = task.predictive(&task.posterior(&history), action.argument);
        if let Some(c) = corruption {
            let p0 = if pred[0] >= c.shift { pred[0] - c.shift } else { pred[0] + c.shift };
            pred = [p0, 1.0 - p0];
        }
        let obs_dist = vec![(vec![vocab.bit(false)], pred[0]), (vec![vocab.bit(true)], pred[1])];
        let ctx = ContextState::after_turns(task, &turns[..=pos]);
        let factual = params.sequence_log_prob(&ctx, next)?;
        let marginal = params.marginal_action_log_prob(&ctx, &obs_dist, next)?;
        row.push(InfoGainEntry {
            value: factual - marginal,
            valid: true,
        });
    }
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::TurnRecord;
    use crate::env::ActionSpec;
    use crate::policy::PolicySpace;
    use crate::rollout::valid_turn_flags;

    fn task() -> HiddenIntentTask {
        HiddenIntentTask::binary(2, 1, 0.0, 3).unwrap()
    }

    /// QUERY(0) -> bit, then ANSWER(answer).
    fn query_then_answer(task: &HiddenIntentTask, bit: bool, answer: usize) -> Trajectory {
        let v = task.vocab();
        Trajectory::new(
            "t",
            vec![
                TurnRecord::new(1, task.encode_action(ActionSpec::query(0)).unwrap().to_vec(), Some(vec![v.bit(bit)])),
                TurnRecord::new(2, task.encode_action(ActionSpec::answer(answer)).unwrap().to_vec(), None),
            ],
            true,
        )
        .unwrap()
    }

    #[test]
    fn slot_blind_policy_gives_zero() {
        let t = task();
        let p = PolicyParams::zeros(PolicySpace::for_task(&t));
        let traj = query_then_answer(&t, true, 1);
        let flags = valid_turn_flags(&traj);
        assert_eq!(flags, vec![true, false]);
        let mask = MaskSpec::new(MaskStrategy::FixedMaskToken, t.vocab(), 0);
        let row = info_gain_per_turn(&t, &traj, &p, &mask, &flags, 0).unwrap();
        assert_eq!(row[0], InfoGainEntry { value: 0.0, valid: true });
        assert!(!row[1].valid);
        let exact = info_gain_exact_marginal(&t, &traj, &p, &flags).unwrap();
        assert!(exact[0].value.abs() < 1e-15);
    }

    #[test]
    fn observation_equal_to_placeholder_gives_zero() {
        let t = task();
        let v = t.vocab();
        let p = PolicyParams::random(PolicySpace::for_task(&t), 2.0, &mut ChaCha8Rng::seed_from_u64(1));
        // observation tokens are the mask token itself
        let traj = Trajectory::new(
            "t",
            vec![
                TurnRecord::new(1, t.encode_action(ActionSpec::query(0)).unwrap().to_vec(), Some(vec![v.mask()])),
                TurnRecord::new(2, t.encode_action(ActionSpec::answer(0)).unwrap().to_vec(), None),
            ],
            true,
        )
        .unwrap();
        let mask = MaskSpec::new(MaskStrategy::FixedMaskToken, v, 0);
        let row = info_gain_per_turn(&t, &traj, &p, &mask, &[true, false], 0).unwrap();
        assert_eq!(row[0].value, 0.0);
    }

    #[test]
    fn constructed_point_eight_versus_half() {
        // pi(a | h, o) = 0.8, pi(a | h, mask) = 0.5 for the verb; the argument
        // token is forced (single legal intent choice is impossible with M=2,
        // so put identical rows under both contexts for the argument).
        let t = task();
        let v = t.vocab();
        let mut p = PolicyParams::zeros(PolicySpace::for_task(&t));
        let traj = query_then_answer(&t, true, 1);
        let ctx = ContextState::after_turns(&t, &traj.turns()[..1]);
        let i = p.weight_index(&ctx, v.verb(crate::env::Verb::Answer));
        p.set_weight(i, 4f64.ln()).unwrap();
        let mask = MaskSpec::new(MaskStrategy::FixedMaskToken, v, 0);
        let row = info_gain_per_turn(&t, &traj, &p, &mask, &[true, false], 0).unwrap();
        // verb term log(0.8/0.5), argument term 0, averaged over 2 tokens
        let per_seq = (0.8f64 / 0.5).ln();
        assert!((per_seq - 0.4700).abs() < 1e-4);
        assert!((row[0].value - per_seq / 2.0).abs() < 1e-12);
    }

    #[test]
    fn one_token_next_action_is_not_averaged_away() {
        // L_{t+1} = 1 teacher-forced next action: r = log(0.8 / 0.5)
        let t = task();
        let v = t.vocab();
        let mut p = PolicyParams::zeros(PolicySpace::for_task(&t));
        let first = TurnRecord::new(1, t.encode_action(ActionSpec::query(0)).unwrap().to_vec(), Some(vec![v.bit(true)]));
        let traj = Trajectory::new(
            "t",
            vec![first.clone(), TurnRecord::new(2, vec![v.verb(crate::env::Verb::Answer)], None)],
            true,
        )
        .unwrap();
        let ctx = ContextState::after_turns(&t, &[first]);
        let i = p.weight_index(&ctx, v.verb(crate::env::Verb::Answer));
        p.set_weight(i, 4f64.ln()).unwrap();
        let mask = MaskSpec::new(MaskStrategy::FixedMaskToken, v, 0);
        let row = info_gain_per_turn(&t, &traj, &p, &mask, &[true, false], 0).unwrap();
        assert!((row[0].value - (0.8f64 / 0.5).ln()).abs() < 1e-12);
    }

    #[test]
    fn exact_marginal_two_outcome_case() {
        // M=2, K=1: the observation identifies the intent. Answer head depends
        // on the observed bit.
        let t = task();
        let v = t.vocab();
        let space = PolicySpace::for_task(&t);
        let mut p = PolicyParams::zeros(space);
        let probe = query_then_answer(&t, true, 1);
        let base = ContextState::after_turns(&t, &probe.turns()[..1]).with_pending(Some(crate::env::Verb::Answer));
        // pi(answer=bit | bit) = 0.9 on the argument
        for bit in [false, true] {
            let c = base.with_obs_slot(ObsSlot::Token(v.bit(bit)));
            let i = p.weight_index(&c, v.arg(bit as usize));
            p.set_weight(i, 9f64.ln()).unwrap();
        }
        let traj = query_then_answer(&t, true, 1);
        let row = info_gain_exact_marginal(&t, &traj, &p, &[true, false]).unwrap();
        // verb prob is 1/2 in both contexts; argument 0.9 vs marginal 0.5
        assert!((row[0].value - (0.9f64 / 0.5).ln()).abs() < 1e-12);
        let traj = query_then_answer(&t, true, 0);
        let row = info_gain_exact_marginal(&t, &traj, &p, &[true, false]).unwrap();
        assert!((row[0].value - (0.1f64 / 0.5).ln()).abs() < 1e-12);
    }

    #[test]
    fn point_mass_observation_gives_zero_exact() {
        // after observing the single attribute, re-querying it is deterministic
        let t = task();
        let v = t.vocab();
        let p = PolicyParams::random(PolicySpace::for_task(&t), 2.0, &mut ChaCha8Rng::seed_from_u64(3));
        let q = t.encode_action(ActionSpec::query(0)).unwrap().to_vec();
        let traj = Trajectory::new(
            "t",
            vec![
                TurnRecord::new(1, q.clone(), Some(vec![v.bit(false)])),
                TurnRecord::new(2, q, Some(vec![v.bit(false)])),
                TurnRecord::new(3, t.encode_action(ActionSpec::answer(0)).unwrap().to_vec(), None),
            ],
            true,
        )
        .unwrap();
        let row = info_gain_exact_marginal(&t, &traj, &p, &[true, true, false]).unwrap();
        assert!(row[0].value != 0.0);
        assert!(row[1].value.abs() < 1e-15);
    }

    #[test]
    fn flag_inconsistency_is_an_error() {
        let t = task();
        let p = PolicyParams::zeros(PolicySpace::for_task(&t));
        let traj = query_then_answer(&t, true, 1);
        let mask = MaskSpec::new(MaskStrategy::FixedMaskToken, t.vocab(), 0);
        assert!(matches!(
            info_gain_per_turn(&t, &traj, &p, &mask, &[true, true], 0),
            Err(InfoGainError::MissingNextAction(2))
        ));
        assert!(matches!(
            info_gain_per_turn(&t, &traj, &p, &mask, &[true], 0),
            Err(InfoGainError::FlagCount { .. })
        ));
    }

    #[test]
    fn cumulative_sums_valid_entries() {
        let e = |value, valid| InfoGainEntry { value, valid };
        assert_eq!(cumulative_info_gain(&[e(0.5, false), e(0.7, false)]), 0.0);
        assert!((cumulative_info_gain(&[e(0.1, true), e(9.0, false), e(0.2, true)]) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn random_placeholder_is_keyed() {
        let v = Vocabulary::new(4);
        let m = MaskSpec::new(MaskStrategy::RandomTokens, v, 42);
        assert_eq!(m.placeholder(3, 1), m.placeholder(3, 1));
        let draws: std::collections::HashSet<_> = (0..64).map(|k| m.placeholder(k, 1)).collect();
        assert!(draws.len() > 1);
        assert!(draws.iter().all(|d| d.len() == 1 && matches!(v.kind(d[0]), Some(crate::env::TokenKind::Filler))));
    }

    #[test]
    fn forward_call_accounting() {
        let e = InfoGainEntry { value: 0.0, valid: true };
        let table = InfoGainTable::new(InfoGainMode::Placeholder, vec![vec![e; 5], vec![e; 4]]);
        assert_eq!(table.forward_calls(4), 6);
        assert_eq!(table.forward_calls(9), 2);
    }
}
