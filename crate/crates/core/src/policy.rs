//! Log-linear softmax policy over an enumerable context space.
//!
//! Each context state owns one row of logits over the vocabulary. Sampling and
//! scoring restrict the softmax to the tokens the action grammar allows at that
//! state: a verb first, then an argument whose range depends on the verb.
//!
//! The context for the next action is derived from the turn history. Bits from
//! every observation except the most recent one live in `revealed`; the most
//! recent observation token sits in `obs_slot`. Swapping `obs_slot` for a
//! placeholder token gives the counterfactual context with only the latest
//! observation masked.

use std::io::{Read, Write};
use std::ops::{Deref, Range};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Token, TurnRecord};
use crate::env::{ActionSpec, HiddenIntentTask, Revealed, TokenKind, Verb, Vocabulary};

const CHECKPOINT_MAGIC: &[u8; 8] = b"INFOPOCK";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(u32),
    #[error("token {token} is not legal at this point of the action grammar")]
    IllegalToken { token: u32 },
    #[error("observation distribution is empty")]
    EmptyObsDist,
    #[error("weight at index {0} is not finite")]
    NonFinite(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObsSlot {
    Absent,
    Token(Token),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContextState {
    pub revealed: Vec<Revealed>,
    pub pending: Option<Verb>,
    /// Index of the turn whose action is being produced (1-based).
    pub turn: usize,
    pub obs_slot: ObsSlot,
}

impl ContextState {
    /// Context for the action that follows `turns`.
    pub fn after_turns(task: &HiddenIntentTask, turns: &[TurnRecord]) -> Self {
        let vocab = task.vocab();
        let mut revealed = vec![Revealed::Unknown; task.num_attributes];
        let older = turns.len().saturating_sub(1);
        for turn in &turns[..older] {
            if let (Some(j), Some(bit)) = (queried_attribute(&vocab, turn), observed_bit(&vocab, turn)) {
                if j < revealed.len() {
                    revealed[j] = Revealed::from(bit);
                }
            }
        }
        let obs_slot = turns
            .last()
            .and_then(|t| t.observation_tokens.as_ref())
            .and_then(|o| o.last())
            .map_or(ObsSlot::Absent, |&t| ObsSlot::Token(t));
        Self {
            revealed,
            pending: None,
            turn: turns.len() + 1,
            obs_slot,
        }
    }

    pub fn with_obs_slot(&self, obs_slot: ObsSlot) -> Self {
        Self {
            obs_slot,
            ..self.clone()
        }
    }

    pub fn with_pending(&self, pending: Option<Verb>) -> Self {
        Self {
            pending,
            ..self.clone()
        }
    }
}

fn queried_attribute(vocab: &Vocabulary, turn: &TurnRecord) -> Option<usize> {
    match turn.action_tokens.as_slice() {
        [v, a] => match (vocab.kind(*v), vocab.kind(*a)) {
            (Some(TokenKind::Verb(Verb::Query)), Some(TokenKind::Arg(j))) => Some(j),
            _ => None,
        },
        _ => None,
    }
}

fn observed_bit(vocab: &Vocabulary, turn: &TurnRecord) -> Option<bool> {
    match vocab.kind(*turn.observation_tokens.as_ref()?.last()?) {
        Some(TokenKind::Bit(b)) => Some(b),
        _ => None,
    }
}

/// Shape of the context space for one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySpace {
    pub num_intents: usize,
    pub num_attributes: usize,
    pub horizon: usize,
    pub vocab: Vocabulary,
}

impl PolicySpace {
    pub fn for_task(task: &HiddenIntentTask) -> Self {
        Self {
            num_intents: task.num_intents,
            num_attributes: task.num_attributes,
            horizon: task.horizon,
            vocab: task.vocab(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    /// `3^K * (#verbs + 1) * (T_max + 1) * (vocab + 1)`.
    pub fn num_states(&self) -> usize {
        3usize.pow(self.num_attributes as u32) * 3 * (self.horizon + 1) * (self.vocab_size() + 1)
    }

    pub fn num_weights(&self) -> usize {
        self.num_states() * self.vocab_size()
    }

    pub fn state_index(&self, ctx: &ContextState) -> usize {
        let revealed = ctx.revealed.iter().rev().fold(0, |acc, r| acc * 3 + r.digit());
        let pending = match ctx.pending {
            None => 0,
            Some(Verb::Query) => 1,
            Some(Verb::Answer) => 2,
        };
        let turn = ctx.turn.min(self.horizon);
        let slot = match ctx.obs_slot {
            ObsSlot::Absent => 0,
            ObsSlot::Token(t) => 1 + t.index().min(self.vocab_size() - 1),
        };
        ((revealed * 3 + pending) * (self.horizon + 1) + turn) * (self.vocab_size() + 1) + slot
    }

    /// Token ids allowed at the given grammar position.
    pub fn legal(&self, pending: Option<Verb>) -> Range<usize> {
        match pending {
            None => 0..2,
            Some(Verb::Query) => 2..2 + self.num_attributes,
            Some(Verb::Answer) => 2..2 + self.num_intents,
        }
    }
}

/// Log-softmax over `logits`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// `log(sum(exp(xs)))`, `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Gradient entries keyed by flat weight index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGrad {
    pub entries: std::collections::BTreeMap<usize, f64>,
}

impl SparseGrad {
    pub fn get(&self, index: usize) -> f64 {
        self.entries.get(&index).copied().unwrap_or(0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.entries.values().all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    space: PolicySpace,
    weights: Vec<f64>,
    version: u64,
}

impl PolicyParams {
    pub fn zeros(space: PolicySpace) -> Self {
        Self {
            space,
            weights: vec![0.0; space.num_weights()],
            version: 0,
        }
    }

    /// Weights drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(space: PolicySpace, scale: f64, rng: &mut R) -> Self {
        let weights = (0..space.num_weights())
            .map(|_| if scale > 0.0 { rng.gen_range(-scale..=scale) } else { 0.0 })
            .collect();
        Self {
            space,
            weights,
            version: 0,
        }
    }

    pub fn from_weights(space: PolicySpace, weights: Vec<f64>, version: u64) -> Result<Self, PolicyError> {
        if weights.len() != space.num_weights() {
            return Err(PolicyError::Checkpoint(format!(
                "expected {} weights, got {}",
                space.num_weights(),
                weights.len()
            )));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(PolicyError::NonFinite(i));
        }
        Ok(Self { space, weights, version })
    }

    pub fn space(&self) -> &PolicySpace {
        &self.space
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_weight(&mut self, index: usize, value: f64) -> Result<(), PolicyError> {
        if !value.is_finite() {
            return Err(PolicyError::NonFinite(index));
        }
        self.weights[index] = value;
        Ok(())
    }

    /// Flat index of `(state, token)`.
    pub fn weight_index(&self, ctx: &ContextState, token: Token) -> usize {
        self.space.state_index(ctx) * self.space.vocab_size() + token.index()
    }

    /// `weights += step * direction`, bumping the version.
    pub fn apply_step(&mut self, direction: &[f64], step: f64) -> Result<(), PolicyError> {
        assert_eq!(direction.len(), self.weights.len());
        for (i, (w, d)) in self.weights.iter_mut().zip(direction).enumerate() {
            *w += step * d;
            if !w.is_finite() {
                return Err(PolicyError::NonFinite(i));
            }
        }
        self.version += 1;
        Ok(())
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot(Arc::new(self.clone()))
    }

    fn row(&self, ctx: &ContextState) -> &[f64] {
        let v = self.space.vocab_size();
        let s = self.space.state_index(ctx);
        &self.weights[s * v..(s + 1) * v]
    }

    /// Legal token range and its log-probabilities.
    pub fn legal_log_probs(&self, ctx: &ContextState) -> (Range<usize>, Vec<f64>) {
        let legal = self.space.legal(ctx.pending);
        let lp = log_softmax(&self.row(ctx)[legal.clone()]);
        (legal, lp)
    }

    fn check_token(&self, token: Token, legal: &Range<usize>) -> Result<(), PolicyError> {
        if token.index() >= self.space.vocab_size() {
            return Err(PolicyError::UnknownToken(token.0));
        }
        if !legal.contains(&token.index()) {
            return Err(PolicyError::IllegalToken { token: token.0 });
        }
        Ok(())
    }

    /// Walks `tokens` through the grammar, yielding the context of each token.
    pub fn token_contexts(&self, ctx: &ContextState, tokens: &[Token]) -> Result<Vec<ContextState>, PolicyError> {
        let vocab = self.space.vocab;
        let mut cur = ctx.clone();
        let mut out = Vec::with_capacity(tokens.len());
        for (pos, &tok) in tokens.iter().enumerate() {
            if pos > 0 && cur.pending.is_none() {
                // grammar already closed by an argument token
                return Err(PolicyError::IllegalToken { token: tok.0 });
            }
            self.check_token(tok, &self.space.legal(cur.pending))?;
            out.push(cur.clone());
            cur = match vocab.kind(tok) {
                Some(TokenKind::Verb(v)) => cur.with_pending(Some(v)),
                _ => cur.with_pending(None),
            };
        }
        Ok(out)
    }

    /// Per-token `log pi(y_k | context, y_<k)` under teacher forcing.
    pub fn action_log_prob(&self, ctx: &ContextState, tokens: &[Token]) -> Result<Vec<f64>, PolicyError> {
        let contexts = self.token_contexts(ctx, tokens)?;
        Ok(contexts
            .iter()
            .zip(tokens)
            .map(|(c, t)| {
                let (legal, lp) = self.legal_log_probs(c);
                lp[t.index() - legal.start]
            })
            .collect())
    }

    pub fn sequence_log_prob(&self, ctx: &ContextState, tokens: &[Token]) -> Result<f64, PolicyError> {
        Ok(self.action_log_prob(ctx, tokens)?.iter().sum())
    }

    /// Every complete action legal at `ctx` with its probability.
    pub fn action_distribution(&self, ctx: &ContextState) -> Vec<(ActionSpec, f64)> {
        let start = ctx.with_pending(None);
        let (verbs, verb_lp) = self.legal_log_probs(&start);
        let mut out = Vec::new();
        for (vi, v) in verbs.enumerate() {
            let verb = if v == 0 { Verb::Query } else { Verb::Answer };
            let (args, arg_lp) = self.legal_log_probs(&start.with_pending(Some(verb)));
            for (ai, _) in args.enumerate() {
                out.push((
                    ActionSpec { verb, argument: ai },
                    (verb_lp[vi] + arg_lp[ai]).exp(),
                ));
            }
        }
        out
    }

    fn sample_token<R: Rng + ?Sized>(&self, ctx: &ContextState, rng: &mut R) -> (Token, f64) {
        let (legal, lp) = self.legal_log_probs(ctx);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, l) in lp.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                return (Token((legal.start + i) as u32), *l);
            }
        }
        let last = lp.len() - 1;
        (Token((legal.start + last) as u32), lp[last])
    }

    /// Samples verb then argument autoregressively.
    pub fn sample_action<R: Rng + ?Sized>(&self, ctx: &ContextState, rng: &mut R) -> (ActionSpec, [f64; 2]) {
        let start = ctx.with_pending(None);
        let (verb_tok, verb_lp) = self.sample_token(&start, rng);
        let verb = if verb_tok.0 == 0 { Verb::Query } else { Verb::Answer };
        let (arg_tok, arg_lp) = self.sample_token(&start.with_pending(Some(verb)), rng);
        (
            ActionSpec {
                verb,
                argument: arg_tok.index() - 2,
            },
            [verb_lp, arg_lp],
        )
    }

    /// Adds `scale * grad log pi(tokens | ctx)` into a dense gradient buffer.
    pub fn accumulate_grad_log_prob(
        &self,
        ctx: &ContextState,
        tokens: &[Token],
        scale: f64,
        out: &mut [f64],
    ) -> Result<(), PolicyError> {
        let contexts = self.token_contexts(ctx, tokens)?;
        let v = self.space.vocab_size();
        for (c, tok) in contexts.iter().zip(tokens) {
            let (legal, lp) = self.legal_log_probs(c);
            let base = self.space.state_index(c) * v;
            for (i, l) in legal.clone().zip(&lp) {
                out[base + i] -= scale * l.exp();
            }
            out[base + tok.index()] += scale;
        }
        Ok(())
    }

    /// Adds `scales[k] * grad log pi(tokens[k] | context_k)` for each token.
    pub fn accumulate_token_grads(
        &self,
        ctx: &ContextState,
        tokens: &[Token],
        scales: &[f64],
        out: &mut [f64],
    ) -> Result<(), PolicyError> {
        assert_eq!(tokens.len(), scales.len());
        let contexts = self.token_contexts(ctx, tokens)?;
        let v = self.space.vocab_size();
        for ((c, tok), &scale) in contexts.iter().zip(tokens).zip(scales) {
            if scale == 0.0 {
                continue;
            }
            let (legal, lp) = self.legal_log_probs(c);
            let base = self.space.state_index(c) * v;
            for (i, l) in legal.clone().zip(&lp) {
                out[base + i] -= scale * l.exp();
            }
            out[base + tok.index()] += scale;
        }
        Ok(())
    }

    pub fn grad_log_prob(&self, ctx: &ContextState, tokens: &[Token]) -> Result<SparseGrad, PolicyError> {
        let contexts = self.token_contexts(ctx, tokens)?;
        let v = self.space.vocab_size();
        let mut grad = SparseGrad::default();
        for (c, tok) in contexts.iter().zip(tokens) {
            let (legal, lp) = self.legal_log_probs(c);
            let base = self.space.state_index(c) * v;
            for (i, l) in legal.clone().zip(&lp) {
                *grad.entries.entry(base + i).or_default() -= l.exp();
            }
            *grad.entries.entry(base + tok.index()).or_default() += 1.0;
        }
        Ok(grad)
    }

    /// `KL(pi_self || pi_reference)` over the legal tokens at `ctx`.
    pub fn exact_kl(&self, reference: &PolicyParams, ctx: &ContextState) -> f64 {
        let (_, lp) = self.legal_log_probs(ctx);
        let (_, lq) = reference.legal_log_probs(ctx);
        lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum::<f64>().max(0.0)
    }

    /// Adds `scale * grad KL(pi_self || pi_reference)` at `ctx`.
    pub fn accumulate_kl_grad(&self, reference: &PolicyParams, ctx: &ContextState, scale: f64, out: &mut [f64]) {
        let (legal, lp) = self.legal_log_probs(ctx);
        let (_, lq) = reference.legal_log_probs(ctx);
        let kl: f64 = lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum();
        let base = self.space.state_index(ctx) * self.space.vocab_size();
        for ((i, p), q) in legal.zip(&lp).zip(&lq) {
            out[base + i] += scale * p.exp() * (p - q - kl);
        }
    }

    /// `log sum_o P(o) pi(tokens | ctx with obs_slot = o)`, the sequence-level
    /// mixture over observations.
    pub fn marginal_action_log_prob(
        &self,
        ctx: &ContextState,
        obs_dist: &[(Vec<Token>, f64)],
        tokens: &[Token],
    ) -> Result<f64, PolicyError> {
        if obs_dist.is_empty() {
            return Err(PolicyError::EmptyObsDist);
        }
        let mut terms = Vec::with_capacity(obs_dist.len());
        for (obs, p) in obs_dist {
            if *p <= 0.0 {
                continue;
            }
            let slot = obs.last().map_or(ObsSlot::Absent, |&t| ObsSlot::Token(t));
            terms.push(p.ln() + self.sequence_log_prob(&ctx.with_obs_slot(slot), tokens)?);
        }
        if terms.is_empty() {
            return Err(PolicyError::EmptyObsDist);
        }
        Ok(log_sum_exp(&terms))
    }

    /// Header (vocab size, state count, version as little-endian u64) then
    /// row-major little-endian f64 weights.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), PolicyError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.space.vocab_size() as u64).to_le_bytes())?;
        w.write_all(&(self.space.num_states() as u64).to_le_bytes())?;
        w.write_all(&self.version.to_le_bytes())?;
        for x in &self.weights {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(space: PolicySpace, mut r: R) -> Result<Self, PolicyError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(PolicyError::Checkpoint("bad magic".into()));
        }
        let mut word = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> Result<u64, PolicyError> {
            r.read_exact(&mut word)?;
            Ok(u64::from_le_bytes(word))
        };
        let vocab = next_u64(&mut r)? as usize;
        let states = next_u64(&mut r)? as usize;
        let version = next_u64(&mut r)?;
        if vocab != space.vocab_size() || states != space.num_states() {
            return Err(PolicyError::Checkpoint(format!(
                "shape {states}x{vocab} does not match task shape {}x{}",
                space.num_states(),
                space.vocab_size()
            )));
        }
        let mut bytes = vec![0u8; vocab * states * 8];
        r.read_exact(&mut bytes)?;
        let weights = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::from_weights(space, weights, version)
    }
}

/// Frozen, cheaply cloneable copy of the parameters.
#[derive(Debug, Clone)]
pub struct PolicySnapshot(Arc<PolicyParams>);

impl Deref for PolicySnapshot {
    type Target = PolicyParams;

    fn deref(&self) -> &PolicyParams {
        &self.0
    }
}
