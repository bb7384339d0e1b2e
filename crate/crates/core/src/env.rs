//! Hidden-intent question-answering environment.
//!
//! The user holds a latent intent `Z` drawn uniformly from `M` candidates. Each
//! intent is described by `K` binary attributes (row `Z` of the attribute
//! table). The agent may `QUERY(j)` an attribute, receiving the bit `B[Z, j]`
//! flipped with probability `noise`, or `ANSWER(z)`, which ends the episode with
//! reward 1 iff `z == Z`. Episodes that reach the horizon without an answer
//! score 0.
//!
//! Every distribution here is finite, so the exact observation law (both given
//! `Z` and marginalised over the agent's posterior) is available in closed form.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainError, Token, Trajectory, TurnRecord};
use crate::policy::{ContextState, PolicyParams};

/// Leaf budget for exhaustive enumeration.
pub const MAX_ENUMERATION_LEAVES: usize = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("{verb:?} argument {arg} out of range (limit {limit})")]
    ArgumentOutOfRange { verb: Verb, arg: usize, limit: usize },
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("observation distribution is only defined for QUERY actions")]
    NotAQuery,
    #[error("token sequence {0:?} is not a valid action")]
    BadActionTokens(Vec<Token>),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("enumeration exceeds {0} leaves")]
    TreeTooLarge(usize),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verb {
    Query,
    Answer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionSpec {
    pub verb: Verb,
    pub argument: usize,
}

impl ActionSpec {
    pub fn query(attribute: usize) -> Self {
        Self {
            verb: Verb::Query,
            argument: attribute,
        }
    }

    pub fn answer(intent: usize) -> Self {
        Self {
            verb: Verb::Answer,
            argument: intent,
        }
    }
}

/// Which placeholder family a reserved token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Verb(Verb),
    Arg(usize),
    Bit(bool),
    Mask,
    Placeholder,
    Filler,
}

/// Token layout:
///
/// ```text
/// 0            VERB_QUERY
/// 1            VERB_ANSWER
/// 2..2+A       ARG_0 .. ARG_{A-1}        (A = max(M, K))
/// 2+A, 3+A     BIT_0, BIT_1
/// 4+A          MASK
/// 5+A, 6+A     NO, INFO                  ("No information found.")
/// 7+A, 8+A     EMPTY, OBSERVATION        ("Empty observation.")
/// 9+A..13+A    FILLER_0 .. FILLER_3
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub num_args: usize,
}

pub const NUM_FILLER_TOKENS: usize = 4;

impl Vocabulary {
    pub fn new(num_args: usize) -> Self {
        Self { num_args }
    }

    pub fn size(&self) -> usize {
        2 + self.num_args + 2 + 1 + 4 + NUM_FILLER_TOKENS
    }

    pub fn verb(&self, verb: Verb) -> Token {
        match verb {
            Verb::Query => Token(0),
            Verb::Answer => Token(1),
        }
    }

    pub fn arg(&self, i: usize) -> Token {
        debug_assert!(i < self.num_args);
        Token((2 + i) as u32)
    }

    pub fn bit(&self, b: bool) -> Token {
        Token((2 + self.num_args + b as usize) as u32)
    }

    pub fn mask(&self) -> Token {
        Token((4 + self.num_args) as u32)
    }

    pub fn default_placeholder(&self) -> Vec<Token> {
        let base = 5 + self.num_args as u32;
        vec![Token(base), Token(base + 1)]
    }

    pub fn alt_placeholder(&self) -> Vec<Token> {
        let base = 7 + self.num_args as u32;
        vec![Token(base), Token(base + 1)]
    }

    pub fn filler(&self, i: usize) -> Token {
        debug_assert!(i < NUM_FILLER_TOKENS);
        Token((9 + self.num_args + i) as u32)
    }

    pub fn kind(&self, token: Token) -> Option<TokenKind> {
        let id = token.index();
        let a = self.num_args;
        Some(match id {
            0 => TokenKind::Verb(Verb::Query),
            1 => TokenKind::Verb(Verb::Answer),
            i if i < 2 + a => TokenKind::Arg(i - 2),
            i if i < 4 + a => TokenKind::Bit(i == 3 + a),
            i if i == 4 + a => TokenKind::Mask,
            i if i < 9 + a => TokenKind::Placeholder,
            i if i < 9 + a + NUM_FILLER_TOKENS => TokenKind::Filler,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenIntentTask {
    pub num_intents: usize,
    pub num_attributes: usize,
    /// `table[z][j]` is attribute `j` of intent `z`.
    pub table: Vec<Vec<bool>>,
    pub noise: f64,
    pub horizon: usize,
    /// Rows of the table are pairwise distinct.
    pub identifiable: bool,
}

impl HiddenIntentTask {
    /// Attribute table taken from explicit rows.
    pub fn from_rows(table: Vec<Vec<bool>>, noise: f64, horizon: usize) -> Result<Self, EnvError> {
        let num_intents = table.len();
        if num_intents < 2 {
            return Err(EnvError::InvalidTask(format!("need at least 2 intents, got {num_intents}")));
        }
        let num_attributes = table[0].len();
        if num_attributes == 0 || table.iter().any(|r| r.len() != num_attributes) {
            return Err(EnvError::InvalidTask("attribute rows must be nonempty and equal length".into()));
        }
        if !(0.0..0.5).contains(&noise) {
            return Err(EnvError::InvalidTask(format!("noise must lie in [0, 0.5), got {noise}")));
        }
        if horizon == 0 {
            return Err(EnvError::InvalidTask("horizon must be at least 1".into()));
        }
        let identifiable = (0..num_intents).all(|a| (a + 1..num_intents).all(|b| table[a] != table[b]));
        Ok(Self {
            num_intents,
            num_attributes,
            table,
            noise,
            horizon,
            identifiable,
        })
    }

    /// Row `z` is the little-endian binary encoding of `z` over `K` bits.
    pub fn binary(num_intents: usize, num_attributes: usize, noise: f64, horizon: usize) -> Result<Self, EnvError> {
        let table = (0..num_intents)
            .map(|z| (0..num_attributes).map(|j| (z >> j) & 1 == 1).collect())
            .collect();
        Self::from_rows(table, noise, horizon)
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.num_intents.max(self.num_attributes))
    }

    pub fn check_action(&self, action: ActionSpec) -> Result<(), EnvError> {
        let limit = match action.verb {
            Verb::Query => self.num_attributes,
            Verb::Answer => self.num_intents,
        };
        if action.argument >= limit {
            return Err(EnvError::ArgumentOutOfRange {
                verb: action.verb,
                arg: action.argument,
                limit,
            });
        }
        Ok(())
    }

    /// Verb token followed by argument token.
    pub fn encode_action(&self, action: ActionSpec) -> Result<[Token; 2], EnvError> {
        self.check_action(action)?;
        let vocab = self.vocab();
        Ok([vocab.verb(action.verb), vocab.arg(action.argument)])
    }

    pub fn decode_action(&self, tokens: &[Token]) -> Result<ActionSpec, EnvError> {
        let vocab = self.vocab();
        let bad = || EnvError::BadActionTokens(tokens.to_vec());
        let [v, a] = tokens else { return Err(bad()) };
        let (Some(TokenKind::Verb(verb)), Some(TokenKind::Arg(argument))) = (vocab.kind(*v), vocab.kind(*a)) else {
            return Err(bad());
        };
        let action = ActionSpec { verb, argument };
        self.check_action(action)?;
        Ok(action)
    }

    pub fn initial_state(&self, intent: usize) -> EnvState {
        assert!(intent < self.num_intents, "intent out of range");
        EnvState {
            intent,
            revealed: vec![Revealed::Unknown; self.num_attributes],
            turn: 0,
            done: false,
            final_guess: None,
            history: Vec::new(),
        }
    }

    /// `P(observed bit = 1 | Z = z, QUERY(j))`.
    fn prob_one(&self, z: usize, j: usize) -> f64 {
        if self.table[z][j] {
            1.0 - self.noise
        } else {
            self.noise
        }
    }

    /// Likelihood of one observed bit.
    pub fn likelihood(&self, z: usize, j: usize, bit: bool) -> f64 {
        let p1 = self.prob_one(z, j);
        if bit {
            p1
        } else {
            1.0 - p1
        }
    }

    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &EnvState,
        action: ActionSpec,
        rng: &mut R,
    ) -> Result<StepOutcome, EnvError> {
        if state.done {
            return Err(EnvError::EpisodeDone);
        }
        self.check_action(action)?;
        let mut next = state.clone();
        next.turn += 1;
        match action.verb {
            Verb::Query => {
                let j = action.argument;
                // always draw so the stream does not depend on the noise level
                let flip = rng.gen::<f64>() < self.noise;
                let bit = self.table[state.intent][j] ^ flip;
                next.revealed[j] = Revealed::from(bit);
                next.history.push((j, bit));
                let reward = if next.turn >= self.horizon {
                    next.done = true;
                    Some(0.0)
                } else {
                    None
                };
                Ok(StepOutcome {
                    state: next,
                    observation: Some(vec![self.vocab().bit(bit)]),
                    reward,
                })
            }
            Verb::Answer => {
                next.done = true;
                next.final_guess = Some(action.argument);
                let reward = if action.argument == state.intent { 1.0 } else { 0.0 };
                Ok(StepOutcome {
                    state: next,
                    observation: None,
                    reward: Some(reward),
                })
            }
        }
    }

    /// Posterior over intents given the agent-visible `(attribute, bit)` history,
    /// starting from the uniform prior.
    pub fn posterior(&self, history: &[(usize, bool)]) -> Vec<f64> {
        let mut w: Vec<f64> = (0..self.num_intents)
            .map(|z| history.iter().map(|&(j, b)| self.likelihood(z, j, b)).product())
            .collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            w.iter_mut().for_each(|x| *x /= total);
        }
        w
    }

    /// `[P(bit=0), P(bit=1)]` for `QUERY(j)` under the given intent weights.
    pub fn predictive(&self, posterior: &[f64], j: usize) -> [f64; 2] {
        let p1: f64 = posterior.iter().enumerate().map(|(z, w)| w * self.prob_one(z, j)).sum();
        [1.0 - p1, p1]
    }

    pub fn observation_distribution(
        &self,
        state: &EnvState,
        action: ActionSpec,
    ) -> Result<ObservationDistribution, EnvError> {
        self.check_action(action)?;
        if action.verb != Verb::Query {
            return Err(EnvError::NotAQuery);
        }
        let j = action.argument;
        let vocab = self.vocab();
        let p1 = self.prob_one(state.intent, j);
        let marginal = self.predictive(&self.posterior(&state.history), j);
        Ok(ObservationDistribution {
            given_intent: vec![(vec![vocab.bit(false)], 1.0 - p1), (vec![vocab.bit(true)], p1)],
            marginal: vec![(vec![vocab.bit(false)], marginal[0]), (vec![vocab.bit(true)], marginal[1])],
        })
    }

    /// Agent-visible `(attribute, bit)` pairs recorded in a turn prefix.
    pub fn history_from_turns(&self, turns: &[TurnRecord]) -> Result<Vec<(usize, bool)>, EnvError> {
        let vocab = self.vocab();
        let mut history = Vec::new();
        for turn in turns {
            let action = self.decode_action(&turn.action_tokens)?;
            if action.verb != Verb::Query {
                continue;
            }
            if let Some(&last) = turn.observation_tokens.as_ref().and_then(|o| o.last()) {
                if let Some(TokenKind::Bit(b)) = vocab.kind(last) {
                    history.push((action.argument, b));
                }
            }
        }
        Ok(history)
    }
}

/// Per-attribute knowledge: unknown, observed 0 or observed 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Revealed {
    Unknown,
    Zero,
    One,
}

impl From<bool> for Revealed {
    fn from(b: bool) -> Self {
        if b {
            Revealed::One
        } else {
            Revealed::Zero
        }
    }
}

impl Revealed {
    pub fn digit(self) -> usize {
        match self {
            Revealed::Unknown => 0,
            Revealed::Zero => 1,
            Revealed::One => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub intent: usize,
    pub revealed: Vec<Revealed>,
    /// Number of actions taken so far.
    pub turn: usize,
    pub done: bool,
    pub final_guess: Option<usize>,
    /// Observed `(attribute, bit)` pairs in order.
    pub history: Vec<(usize, bool)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub observation: Option<Vec<Token>>,
    pub reward: Option<f64>,
}

/// Probability map over observation token sequences.
pub type ObsDist = Vec<(Vec<Token>, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationDistribution {
    /// Conditioned on the true (hidden) intent.
    pub given_intent: ObsDist,
    /// Marginalised over the posterior implied by the visible history.
    pub marginal: ObsDist,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedTrajectory {
    pub intent: usize,
    pub trajectory: Trajectory,
    pub reward: f64,
    pub probability: f64,
}

/// Exhaustively enumerates every `(intent, trajectory)` pair reachable under
/// `policy` with nonzero probability.
pub fn enumerate_trajectories(
    task: &HiddenIntentTask,
    policy: &PolicyParams,
    max_leaves: usize,
) -> Result<Vec<WeightedTrajectory>, EnvError> {
    let mut out = Vec::new();
    let prior = 1.0 / task.num_intents as f64;
    for z in 0..task.num_intents {
        let mut turns = Vec::new();
        expand(task, policy, z, prior, &mut turns, max_leaves, &mut out)?;
    }
    Ok(out)
}

fn expand(
    task: &HiddenIntentTask,
    policy: &PolicyParams,
    intent: usize,
    weight: f64,
    turns: &mut Vec<TurnRecord>,
    max_leaves: usize,
    out: &mut Vec<WeightedTrajectory>,
) -> Result<(), EnvError> {
    let ctx = ContextState::after_turns(task, turns);
    let vocab = task.vocab();
    for (action, action_prob) in policy.action_distribution(&ctx) {
        let w = weight * action_prob;
        if w == 0.0 {
            continue;
        }
        let tokens = task.encode_action(action)?.to_vec();
        let turn_index = turns.len() + 1;
        let leaf = |turns: &mut Vec<TurnRecord>,
                    out: &mut Vec<WeightedTrajectory>,
                    obs: Option<Vec<Token>>,
                    w: f64,
                    reward: f64| {
            if out.len() >= max_leaves {
                return Err(EnvError::TreeTooLarge(max_leaves));
            }
            turns.push(TurnRecord::new(turn_index, tokens.clone(), obs));
            let trajectory = Trajectory::new("enum", turns.clone(), true);
            turns.pop();
            out.push(WeightedTrajectory {
                intent,
                trajectory: trajectory?,
                reward,
                probability: w,
            });
            Ok(())
        };
        match action.verb {
            Verb::Answer => {
                let reward = if action.argument == intent { 1.0 } else { 0.0 };
                leaf(turns, out, None, w, reward)?;
            }
            Verb::Query => {
                for bit in [false, true] {
                    let wb = w * task.likelihood(intent, action.argument, bit);
                    if wb == 0.0 {
                        continue;
                    }
                    let obs = vec![vocab.bit(bit)];
                    if turn_index >= task.horizon {
                        leaf(turns, out, Some(obs), wb, 0.0)?;
                    } else {
                        turns.push(TurnRecord::new(turn_index, tokens.clone(), Some(obs)));
                        let r = expand(task, policy, intent, wb, turns, max_leaves, out);
                        turns.pop();
                        r?;
                    }
                }
            }
        }
    }
    Ok(())
}
