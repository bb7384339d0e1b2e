//! Shared domain types: tokens, turns, trajectories and rollout groups.
//!
//! A trajectory is an ordered list of turns. Each turn holds the agent's action
//! tokens followed by the environment's observation tokens (absent on the
//! terminal turn). Flattening a trajectory yields the token stream together with
//! the response mask `m_k` (1 on agent tokens) and the map `t(k)` from token
//! position to turn index.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infogain::InfoGainTable;

/// Default `epsilon` used in group normalisation.
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("trajectory has no turns")]
    EmptyTrajectory,
    #[error("turn {0} has no action tokens")]
    EmptyAction(usize),
    #[error("turn indices must be strictly increasing and start at 1 (got {got} after {prev})")]
    TurnOrder { prev: usize, got: usize },
    #[error("non-terminal turn {0} is missing its observation")]
    MissingObservation(usize),
    #[error("group needs at least 2 trajectories, got {0}")]
    GroupTooSmall(usize),
    #[error("group has {trajectories} trajectories but {scores} scores")]
    ScoreCount { trajectories: usize, scores: usize },
}

/// Index into a fixed vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Token(pub u32);

impl Token {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// One agent action segment and the feedback that followed it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn_index: usize,
    pub action_tokens: Vec<Token>,
    pub observation_tokens: Option<Vec<Token>>,
}

impl TurnRecord {
    pub fn new(turn_index: usize, action_tokens: Vec<Token>, observation_tokens: Option<Vec<Token>>) -> Self {
        Self {
            turn_index,
            action_tokens,
            observation_tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.action_tokens.len() + self.observation_tokens.as_ref().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat token view of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Flattened {
    pub tokens: Vec<Token>,
    pub mask: Vec<u8>,
    pub turn_idx: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    turns: Vec<TurnRecord>,
    response_mask: Vec<u8>,
    turn_of_token: Vec<usize>,
    pub terminal: bool,
}

impl Trajectory {
    /// Validates the turn list and builds the mask and turn maps.
    ///
    /// Only the last turn may lack an observation.
    pub fn new(task_id: impl Into<String>, turns: Vec<TurnRecord>, terminal: bool) -> Result<Self, DomainError> {
        if turns.is_empty() {
            return Err(DomainError::EmptyTrajectory);
        }
        let mut prev = 0;
        for (pos, turn) in turns.iter().enumerate() {
            if turn.turn_index <= prev {
                return Err(DomainError::TurnOrder {
                    prev,
                    got: turn.turn_index,
                });
            }
            prev = turn.turn_index;
            if turn.action_tokens.is_empty() {
                return Err(DomainError::EmptyAction(turn.turn_index));
            }
            if turn.observation_tokens.is_none() && pos + 1 != turns.len() {
                return Err(DomainError::MissingObservation(turn.turn_index));
            }
        }
        let mut response_mask = Vec::new();
        let mut turn_of_token = Vec::new();
        for turn in &turns {
            for _ in &turn.action_tokens {
                response_mask.push(1);
                turn_of_token.push(turn.turn_index);
            }
            for _ in turn.observation_tokens.iter().flatten() {
                response_mask.push(0);
                turn_of_token.push(turn.turn_index);
            }
        }
        Ok(Self {
            task_id: task_id.into(),
            turns,
            response_mask,
            turn_of_token,
            terminal,
        })
    }

    pub fn turns(&self) -> &[TurnRecord] {
        &self.turns
    }

    pub fn num_turns(&self) -> usize {
        self.turns.len()
    }

    pub fn response_mask(&self) -> &[u8] {
        &self.response_mask
    }

    pub fn turn_of_token(&self) -> &[usize] {
        &self.turn_of_token
    }

    pub fn num_tokens(&self) -> usize {
        self.response_mask.len()
    }

    pub fn num_action_tokens(&self) -> usize {
        self.turns.iter().map(|t| t.action_tokens.len()).sum()
    }

    /// Position in `turns()` of the turn with the given index.
    pub fn position_of_turn(&self, turn_index: usize) -> Option<usize> {
        self.turns.iter().position(|t| t.turn_index == turn_index)
    }

    pub fn flatten(&self) -> Flattened {
        let tokens = self
            .turns
            .iter()
            .flat_map(|t| t.action_tokens.iter().chain(t.observation_tokens.iter().flatten()))
            .copied()
            .collect();
        Flattened {
            tokens,
            mask: self.response_mask.clone(),
            turn_idx: self.turn_of_token.clone(),
        }
    }

    /// Mean action-token count per turn.
    pub fn mean_action_length(&self) -> f64 {
        self.num_action_tokens() as f64 / self.turns.len() as f64
    }
}

/// `G` trajectories sampled for one task, with their external scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub group_id: u64,
    trajectories: Vec<Trajectory>,
    ext_scores: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(group_id: u64, trajectories: Vec<Trajectory>, ext_scores: Vec<f64>) -> Result<Self, DomainError> {
        if trajectories.len() != ext_scores.len() {
            return Err(DomainError::ScoreCount {
                trajectories: trajectories.len(),
                scores: ext_scores.len(),
            });
        }
        if trajectories.len() < 2 {
            return Err(DomainError::GroupTooSmall(trajectories.len()));
        }
        Ok(Self {
            group_id,
            trajectories,
            ext_scores,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn ext_scores(&self) -> &[f64] {
        &self.ext_scores
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mu_ext: f64,
    pub sigma_ext: f64,
    pub mu_info: f64,
    pub sigma_info: f64,
    pub epsilon: f64,
}

/// Population mean and standard deviation. A constant sample has `sigma == 0`
/// exactly regardless of rounding in the mean.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Group statistics for Eq.-3/Eq.-4 style normalisation. Info-gain statistics
/// pool every valid `(trajectory, turn)` entry of the group.
pub fn group_stats(group: &RolloutGroup, info: &InfoGainTable, epsilon: f64) -> GroupStats {
    let (mu_ext, sigma_ext) = mean_std(group.ext_scores());
    let valid: Vec<f64> = info.valid_values().collect();
    let (mu_info, sigma_info) = mean_std(&valid);
    GroupStats {
        mu_ext,
        sigma_ext,
        mu_info,
        sigma_info,
        epsilon,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infogain::{InfoGainEntry, InfoGainMode};

    fn toks(ids: &[u32]) -> Vec<Token> {
        ids.iter().map(|&i| Token(i)).collect()
    }

    #[test]
    fn flatten_single_turn() {
        let traj = Trajectory::new("t", vec![TurnRecord::new(1, toks(&[3, 5]), Some(toks(&[7])))], false).unwrap();
        let flat = traj.flatten();
        assert_eq!(flat.tokens, toks(&[3, 5, 7]));
        assert_eq!(flat.mask, vec![1, 1, 0]);
        assert_eq!(flat.turn_idx, vec![1, 1, 1]);
    }

    #[test]
    fn flatten_two_turns_counts() {
        // obs lengths 1 and 0 (terminal)
        let traj = Trajectory::new(
            "t",
            vec![
                TurnRecord::new(1, toks(&[0, 2]), Some(toks(&[9]))),
                TurnRecord::new(2, toks(&[1, 3]), Some(vec![])),
            ],
            true,
        )
        .unwrap();
        let flat = traj.flatten();
        assert_eq!(flat.tokens.len(), 5);
        assert_eq!(flat.mask.iter().map(|&m| m as usize).sum::<usize>(), 4);

        let traj = Trajectory::new(
            "t",
            vec![
                TurnRecord::new(1, toks(&[0, 2]), Some(toks(&[9]))),
                TurnRecord::new(2, toks(&[1, 3]), Some(toks(&[8, 8]))),
                TurnRecord::new(3, toks(&[1, 4]), None),
            ],
            true,
        )
        .unwrap();
        assert_eq!(traj.flatten().tokens.len(), 9);
    }

    #[test]
    fn rejects_bad_trajectories() {
        assert_eq!(Trajectory::new("t", vec![], true), Err(DomainError::EmptyTrajectory));
        assert_eq!(
            Trajectory::new("t", vec![TurnRecord::new(1, vec![], None)], true),
            Err(DomainError::EmptyAction(1))
        );
        let err = Trajectory::new(
            "t",
            vec![
                TurnRecord::new(2, toks(&[0]), Some(toks(&[1]))),
                TurnRecord::new(2, toks(&[0]), None),
            ],
            true,
        );
        assert!(matches!(err, Err(DomainError::TurnOrder { .. })));
        let err = Trajectory::new(
            "t",
            vec![TurnRecord::new(1, toks(&[0]), None), TurnRecord::new(2, toks(&[0]), None)],
            true,
        );
        assert_eq!(err, Err(DomainError::MissingObservation(1)));
    }

    fn dummy_group(scores: Vec<f64>) -> RolloutGroup {
        let trajs = scores
            .iter()
            .map(|_| Trajectory::new("t", vec![TurnRecord::new(1, toks(&[1, 2]), None)], true).unwrap())
            .collect();
        RolloutGroup::new(0, trajs, scores).unwrap()
    }

    fn table(entries: &[(f64, bool)]) -> InfoGainTable {
        InfoGainTable::new(
            InfoGainMode::Placeholder,
            vec![entries
                .iter()
                .map(|&(value, valid)| InfoGainEntry { value, valid })
                .collect()],
        )
    }

    #[test]
    fn group_stats_examples() {
        let empty = table(&[]);
        let s = group_stats(&dummy_group(vec![1.0, 1.0, 1.0]), &empty, DEFAULT_EPSILON);
        assert_eq!((s.mu_ext, s.sigma_ext), (1.0, 0.0));
        assert_eq!((s.mu_info, s.sigma_info), (0.0, 0.0));

        let s = group_stats(&dummy_group(vec![0.0, 1.0]), &empty, DEFAULT_EPSILON);
        assert_eq!((s.mu_ext, s.sigma_ext), (0.5, 0.5));

        let info = table(&[(0.2, true), (0.4, true), (0.9, false)]);
        let s = group_stats(&dummy_group(vec![0.0, 1.0]), &info, DEFAULT_EPSILON);
        assert!((s.mu_info - 0.3).abs() < 1e-15);
    }

    #[test]
    fn group_needs_two_members() {
        let t = Trajectory::new("t", vec![TurnRecord::new(1, toks(&[1]), None)], true).unwrap();
        assert_eq!(
            RolloutGroup::new(0, vec![t.clone()], vec![1.0]),
            Err(DomainError::GroupTooSmall(1))
        );
        assert!(matches!(
            RolloutGroup::new(0, vec![t.clone(), t], vec![1.0]),
            Err(DomainError::ScoreCount { .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn mask_sums_to_action_tokens(lens in proptest::collection::vec((1usize..4, 0usize..3), 1..6)) {
            let n = lens.len();
            let turns: Vec<TurnRecord> = lens
                .iter()
                .enumerate()
                .map(|(i, &(a, o))| {
                    let obs = if i + 1 == n { None } else { Some(vec![Token(9); o]) };
                    TurnRecord::new(i + 1, vec![Token(1); a], obs)
                })
                .collect();
            let traj = Trajectory::new("p", turns, true).unwrap();
            let mask_sum: usize = traj.response_mask().iter().map(|&m| m as usize).sum();
            proptest::prop_assert_eq!(mask_sum, traj.num_action_tokens());
            // every token lies inside the span of the turn it maps to
            let mut pos = 0;
            for turn in traj.turns() {
                for _ in 0..turn.len() {
                    proptest::prop_assert_eq!(traj.turn_of_token()[pos], turn.turn_index);
                    pos += 1;
                }
            }
        }

        #[test]
        fn group_stats_permutation_invariant(scores in proptest::collection::vec(0.0f64..1.0, 2..8), rot in 0usize..8) {
            let mut rotated = scores.clone();
            let r = rot % scores.len();
            rotated.rotate_left(r);
            let empty = table(&[]);
            let a = group_stats(&dummy_group(scores), &empty, DEFAULT_EPSILON);
            let b = group_stats(&dummy_group(rotated), &empty, DEFAULT_EPSILON);
            proptest::prop_assert!((a.mu_ext - b.mu_ext).abs() < 1e-12);
            proptest::prop_assert!((a.sigma_ext - b.sigma_ext).abs() < 1e-12);
        }
    }
}
