//! Group rollout: `G` episodes per task from one policy snapshot.
//!
//! Each member gets its own rng stream derived from `(seed, group_id, member)`,
//! so rolling members out concurrently or serially gives identical groups.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainError, RolloutGroup, Trajectory, TurnRecord};
use crate::env::{EnvError, HiddenIntentTask};
use crate::policy::{ContextState, PolicyParams};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("group size must be at least 2, got {0}")]
    GroupSize(usize),
    #[error("policy was built for a different task shape")]
    ShapeMismatch,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// SplitMix64 finaliser folded over `parts`.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

pub fn seeded_rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub group_size: usize,
    pub seed: u64,
    /// Pin one intent for the whole group instead of one draw per member.
    pub shared_intent: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            group_size: 5,
            seed: 0,
            shared_intent: false,
        }
    }
}

/// `flags[i][p]`: turn `p` of trajectory `i` has feedback and a successor action.
pub type ValidTurnFlags = Vec<Vec<bool>>;

pub fn valid_turn_flags(traj: &Trajectory) -> Vec<bool> {
    let n = traj.num_turns();
    traj.turns()
        .iter()
        .enumerate()
        .map(|(p, t)| p + 1 < n && t.observation_tokens.as_ref().is_some_and(|o| !o.is_empty()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub intent: usize,
    pub trajectory: Trajectory,
    pub reward: f64,
}

/// Plays one episode to termination.
pub fn run_episode<R: Rng + ?Sized>(
    task: &HiddenIntentTask,
    policy: &PolicyParams,
    intent: usize,
    task_id: &str,
    rng: &mut R,
) -> Result<Episode, RolloutError> {
    let mut state = task.initial_state(intent);
    let mut turns: Vec<TurnRecord> = Vec::new();
    loop {
        let ctx = ContextState::after_turns(task, &turns);
        let (action, _) = policy.sample_action(&ctx, rng);
        let out = task.step(&state, action, rng)?;
        turns.push(TurnRecord::new(
            turns.len() + 1,
            task.encode_action(action)?.to_vec(),
            out.observation,
        ));
        state = out.state;
        if state.done {
            let reward = out.reward.unwrap_or(0.0);
            let trajectory = Trajectory::new(task_id, turns, true)?;
            return Ok(Episode {
                intent,
                trajectory,
                reward,
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOutput {
    pub group: RolloutGroup,
    pub flags: ValidTurnFlags,
    pub intents: Vec<usize>,
}

pub fn rollout_group(
    task: &HiddenIntentTask,
    policy: &PolicyParams,
    cfg: &RolloutConfig,
    group_id: u64,
) -> Result<RolloutOutput, RolloutError> {
    if cfg.group_size < 2 {
        return Err(RolloutError::GroupSize(cfg.group_size));
    }
    if *policy.space() != crate::policy::PolicySpace::for_task(task) {
        return Err(RolloutError::ShapeMismatch);
    }
    let shared = cfg
        .shared_intent
        .then(|| seeded_rng(&[cfg.seed, group_id, u64::MAX]).gen_range(0..task.num_intents));
    let task_id = format!("group-{group_id}");
    let episodes: Vec<Episode> = (0..cfg.group_size as u64)
        .into_par_iter()
        .map(|member| {
            let mut rng = seeded_rng(&[cfg.seed, group_id, member]);
            let intent = shared.unwrap_or_else(|| rng.gen_range(0..task.num_intents));
            run_episode(task, policy, intent, &task_id, &mut rng)
        })
        .collect::<Result<_, _>>()?;
    let flags = episodes.iter().map(|e| valid_turn_flags(&e.trajectory)).collect();
    let intents = episodes.iter().map(|e| e.intent).collect();
    let (trajectories, scores): (Vec<_>, Vec<_>) = episodes.into_iter().map(|e| (e.trajectory, e.reward)).unzip();
    Ok(RolloutOutput {
        group: RolloutGroup::new(group_id, trajectories, scores)?,
        flags,
        intents,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ActionSpec, Verb};
    use crate::policy::PolicySpace;

    fn task() -> HiddenIntentTask {
        HiddenIntentTask::binary(4, 2, 0.1, 4).unwrap()
    }

    /// Policy that puts (almost) all mass on the given verb sequence by turn.
    fn scripted(task: &HiddenIntentTask, verbs: &[Verb]) -> PolicyParams {
        let space = PolicySpace::for_task(task);
        let mut p = PolicyParams::zeros(space);
        let v = task.vocab();
        // every reachable context at turn t prefers verbs[t-1]
        let revealed = [crate::env::Revealed::Unknown, crate::env::Revealed::Zero, crate::env::Revealed::One];
        let mut slots = vec![crate::policy::ObsSlot::Absent];
        slots.extend((0..v.size() as u32).map(|i| crate::policy::ObsSlot::Token(crate::domain::Token(i))));
        for (t, verb) in verbs.iter().enumerate() {
            for r0 in revealed {
                for r1 in revealed {
                    for slot in &slots {
                        let ctx = ContextState {
                            revealed: vec![r0, r1],
                            pending: None,
                            turn: t + 1,
                            obs_slot: *slot,
                        };
                        let i = p.weight_index(&ctx, v.verb(*verb));
                        p.set_weight(i, 800.0).unwrap();
                    }
                }
            }
        }
        p
    }

    #[test]
    fn cardinality_and_determinism() {
        let t = task();
        let p = PolicyParams::random(PolicySpace::for_task(&t), 1.0, &mut seeded_rng(&[1]));
        let cfg = RolloutConfig {
            group_size: 5,
            seed: 3,
            shared_intent: false,
        };
        let a = rollout_group(&t, &p, &cfg, 7).unwrap();
        assert_eq!(a.group.len(), 5);
        assert_eq!(a.group.ext_scores().len(), 5);
        let b = rollout_group(&t, &p, &cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = rollout_group(&t, &p, &cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn serial_members_match_parallel_group() {
        let t = task();
        let p = PolicyParams::random(PolicySpace::for_task(&t), 1.0, &mut seeded_rng(&[2]));
        let cfg = RolloutConfig {
            group_size: 6,
            seed: 11,
            shared_intent: false,
        };
        let group = rollout_group(&t, &p, &cfg, 4).unwrap();
        for member in 0..6u64 {
            let mut rng = seeded_rng(&[11, 4, member]);
            let intent = rng.gen_range(0..t.num_intents);
            let ep = run_episode(&t, &p, intent, "group-4", &mut rng).unwrap();
            assert_eq!(&ep.trajectory, &group.group.trajectories()[member as usize]);
            assert_eq!(ep.reward, group.group.ext_scores()[member as usize]);
        }
    }

    #[test]
    fn shared_intent_pins_z() {
        let t = task();
        let p = PolicyParams::zeros(PolicySpace::for_task(&t));
        let cfg = RolloutConfig {
            group_size: 8,
            seed: 5,
            shared_intent: true,
        };
        let out = rollout_group(&t, &p, &cfg, 0).unwrap();
        assert!(out.intents.iter().all(|&z| z == out.intents[0]));
    }

    #[test]
    fn immediate_answer_has_no_valid_turns() {
        let t = task();
        let p = scripted(&t, &[Verb::Answer]);
        let out = rollout_group(&t, &p, &RolloutConfig::default(), 0).unwrap();
        for (traj, flags) in out.group.trajectories().iter().zip(&out.flags) {
            assert_eq!(traj.num_turns(), 1);
            assert_eq!(flags, &vec![false]);
        }
    }

    #[test]
    fn query_query_answer_flags() {
        let t = task();
        let p = scripted(&t, &[Verb::Query, Verb::Query, Verb::Answer]);
        let out = rollout_group(&t, &p, &RolloutConfig::default(), 1).unwrap();
        for flags in &out.flags {
            assert_eq!(flags, &vec![true, true, false]);
        }
        let total_valid: usize = out.flags.iter().flatten().filter(|&&f| f).count();
        let bound: usize = out.group.trajectories().iter().map(|t| t.num_turns() - 1).sum();
        assert!(total_valid <= bound);
    }

    #[test]
    fn timeout_turn_is_invalid() {
        let t = HiddenIntentTask::binary(2, 1, 0.0, 2).unwrap();
        let traj = Trajectory::new(
            "t",
            vec![
                TurnRecord::new(1, t.encode_action(ActionSpec::query(0)).unwrap().to_vec(), Some(vec![t.vocab().bit(true)])),
                TurnRecord::new(2, t.encode_action(ActionSpec::query(0)).unwrap().to_vec(), Some(vec![t.vocab().bit(true)])),
            ],
            true,
        )
        .unwrap();
        assert_eq!(valid_turn_flags(&traj), vec![true, false]);
    }

    #[test]
    fn rejects_small_groups_and_shape_mismatch() {
        let t = task();
        let p = PolicyParams::zeros(PolicySpace::for_task(&t));
        let cfg = RolloutConfig {
            group_size: 1,
            ..Default::default()
        };
        assert!(matches!(rollout_group(&t, &p, &cfg, 0), Err(RolloutError::GroupSize(1))));
        let other = HiddenIntentTask::binary(2, 1, 0.0, 2).unwrap();
        assert!(matches!(
            rollout_group(&other, &p, &RolloutConfig::default(), 0),
            Err(RolloutError::ShapeMismatch)
        ));
    }
}
