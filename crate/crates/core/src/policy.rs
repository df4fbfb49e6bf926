//! Tabular autoregressive softmax policy.
//!
//! Every generation step maps `(problem, prefix)` to a discrete context
//! state `(feature, problem bucket, previous token, position bucket)` and
//! draws the next token from `softmax(logits[state])`. The feature tracks
//! the policy's own running computation:
//!
//! * `Work(carry, op, operand)` while chain steps remain,
//! * `Done(carry)` once as many values as chain steps have been written,
//! * `Answer(carry)` right after the answer marker on a finished chain,
//! * `Guess` right after a premature answer marker,
//! * `Closed` after the answer token.
//!
//! `carry` is the last digit the policy wrote (the chain's first operand
//! before any), bucketed by `carry_bucket`; operands are bucketed by
//! `operand_bucket`. Widths above one alias distinct arithmetic facts onto
//! one state, which bounds what can be learned without memorizing through
//! the problem bucket.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::{self, StreamRng};
use crate::taskgen::{self, Chain, Problem, Token, TokenKind, Vocabulary};

/// Default ceiling on the number of context states.
pub const DEFAULT_STATE_BUDGET: usize = 4_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub modulus: u32,
    pub vocab: Vocabulary,
    pub carry_bucket: u32,
    pub operand_bucket: u32,
    /// Number of prompt-hash buckets mixed into every state.
    pub problem_buckets: u32,
    pub position_bucket_width: usize,
    pub position_buckets: usize,
}

impl ContextSpec {
    pub fn new(modulus: u32, vocab: Vocabulary) -> Self {
        ContextSpec {
            modulus,
            vocab,
            carry_bucket: 1,
            operand_bucket: 1,
            problem_buckets: 1,
            position_bucket_width: 16,
            position_buckets: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        if self.modulus < 2 {
            return Err(Error::InvalidConfig("context modulus must be >= 2".into()));
        }
        if self.carry_bucket == 0 || self.operand_bucket == 0 {
            return Err(Error::InvalidConfig("bucket widths must be >= 1".into()));
        }
        if self.problem_buckets == 0 || self.position_buckets == 0 || self.position_bucket_width == 0 {
            return Err(Error::InvalidConfig(
                "problem/position bucket counts and width must be >= 1".into(),
            ));
        }
        for d in 0..self.modulus {
            if self.vocab.id(TokenKind::Digit(d)).is_none() {
                return Err(Error::InvalidVocabulary(format!("missing digit {d}")));
            }
        }
        Ok(())
    }

    fn carry_values(&self) -> usize {
        self.modulus.div_ceil(self.carry_bucket) as usize
    }

    fn operand_values(&self) -> usize {
        self.modulus.div_ceil(self.operand_bucket) as usize
    }

    pub fn feature_count(&self) -> usize {
        let c = self.carry_values();
        // Work + Done + Answer + Guess + Closed
        c * 3 * self.operand_values() + c + c + 2
    }

    pub fn state_count(&self) -> usize {
        self.feature_count()
            * self.problem_buckets as usize
            * self.vocab.len()
            * self.position_buckets
    }

    pub fn hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("context spec serializes");
        Sha256::digest(&bytes).into()
    }

    pub fn vocab_hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(&self.vocab).expect("vocabulary serializes");
        Sha256::digest(&bytes).into()
    }

    pub fn problem_bucket(&self, problem: &Problem) -> u32 {
        if self.problem_buckets == 1 {
            return 0;
        }
        let h = problem
            .prompt_tokens
            .iter()
            .fold(0x5eed_u64, |acc, &t| seed::derive_seed(acc, &[t as u64]));
        (h % self.problem_buckets as u64) as u32
    }

    pub fn tracker<'a>(&'a self, problem: &'a Problem) -> ContextTracker<'a> {
        ContextTracker::new(self, problem)
    }

    /// Context states visited while emitting `tokens` for `problem`.
    pub fn states_for(&self, problem: &Problem, tokens: &[Token]) -> Vec<u32> {
        let mut tr = self.tracker(problem);
        tokens
            .iter()
            .map(|&t| {
                let s = tr.state();
                tr.push(t);
                s
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Working,
    AfterAnswer { finished: bool },
    Closed,
}

/// Incremental context-state computation along a generated prefix.
#[derive(Debug, Clone)]
pub struct ContextTracker<'a> {
    spec: &'a ContextSpec,
    chain: &'a Chain,
    bucket: u32,
    written: usize,
    carry: u32,
    phase: Phase,
    prev: Token,
    position: usize,
}

impl<'a> ContextTracker<'a> {
    fn new(spec: &'a ContextSpec, problem: &'a Problem) -> Self {
        let prev = problem
            .prompt_tokens
            .last()
            .copied()
            .or_else(|| spec.vocab.id(TokenKind::Equals))
            .unwrap_or(0);
        ContextTracker {
            spec,
            chain: &problem.chain,
            bucket: spec.problem_bucket(problem),
            written: 0,
            carry: problem.chain.start,
            phase: Phase::Working,
            prev,
            position: 0,
        }
    }

    fn feature(&self) -> usize {
        let s = self.spec;
        let c = s.carry_values();
        let carry = (self.carry / s.carry_bucket) as usize;
        let work = c * 3 * s.operand_values();
        match self.phase {
            Phase::Working => match self.chain.steps.get(self.written) {
                Some(&(op, operand)) => {
                    let a = (operand / s.operand_bucket) as usize;
                    (carry * 3 + op.index()) * s.operand_values() + a
                }
                None => work + carry,
            },
            Phase::AfterAnswer { finished: true } => work + c + carry,
            Phase::AfterAnswer { finished: false } => work + 2 * c,
            Phase::Closed => work + 2 * c + 1,
        }
    }

    pub fn state(&self) -> u32 {
        let s = self.spec;
        let pos = (self.position / s.position_bucket_width).min(s.position_buckets - 1);
        let idx = ((self.feature() * s.problem_buckets as usize + self.bucket as usize)
            * s.vocab.len()
            + self.prev as usize)
            * s.position_buckets
            + pos;
        idx as u32
    }

    pub fn push(&mut self, token: Token) {
        match self.phase {
            Phase::Working => match self.spec.vocab.kind(token) {
                Some(TokenKind::Digit(d)) => {
                    self.carry = d;
                    self.written += 1;
                }
                Some(TokenKind::Answer) => {
                    self.phase = Phase::AfterAnswer {
                        finished: self.written >= self.chain.len(),
                    }
                }
                _ => {}
            },
            Phase::AfterAnswer { .. } => self.phase = Phase::Closed,
            Phase::Closed => {}
        }
        self.prev = token;
        self.position += 1;
    }
}

/// Where a parameter snapshot came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    Init,
    Warmup,
    /// Produced by RL steps inside the iteration's exploration phase.
    Rl,
    /// Produced by fine-tuning the start of `from_iteration`.
    Rft { from_iteration: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Version {
    pub iteration: usize,
    pub rl_step: usize,
    pub origin: Origin,
}

impl Version {
    pub fn initial() -> Self {
        Version {
            iteration: 0,
            rl_step: 0,
            origin: Origin::Init,
        }
    }

    /// True for snapshots that may seed an exploration phase.
    pub fn is_iteration_start(&self) -> bool {
        self.rl_step == 0 && self.origin != Origin::Rl
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub spec: ContextSpec,
    pub version: Version,
    pub logits: Vec<f64>,
}

/// Zero logits plus optional uniform noise in `[-noise, noise]`.
pub fn init_policy(spec: &ContextSpec, seed: u64, noise: f64, budget: usize) -> Result<PolicyParams> {
    spec.validate()?;
    let states = spec.state_count();
    if states > budget {
        return Err(Error::StateBudgetExceeded { states, budget });
    }
    let n = states * spec.vocab.len();
    let logits = if noise > 0.0 {
        let mut rng = seed::stream(seed, &[seed::STREAM_INIT]);
        (0..n).map(|_| rng.random_range(-noise..=noise)).collect()
    } else {
        vec![0.0; n]
    };
    Ok(PolicyParams {
        spec: spec.clone(),
        version: Version::initial(),
        logits,
    })
}

impl PolicyParams {
    pub fn vocab_size(&self) -> usize {
        self.spec.vocab.len()
    }

    pub fn state_count(&self) -> usize {
        self.logits.len() / self.vocab_size()
    }

    pub fn row(&self, state: u32) -> &[f64] {
        let v = self.vocab_size();
        let s = state as usize * v;
        &self.logits[s..s + v]
    }

    pub fn row_mut(&mut self, state: u32) -> &mut [f64] {
        let v = self.vocab_size();
        let s = state as usize * v;
        &mut self.logits[s..s + v]
    }

    pub fn probs(&self, state: u32) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab_size()];
        softmax_into(self.row(state), &mut out);
        out
    }

    pub fn entropy(&self, state: u32) -> f64 {
        let mut p = vec![0.0; self.vocab_size()];
        let (_, h) = softmax_entropy(self.row(state), &mut p);
        h
    }

    pub fn all_finite(&self) -> bool {
        self.logits.iter().all(|x| x.is_finite())
    }

    /// SHA-256 over the dense little-endian checkpoint encoding.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(crate::checkpoint::encode(self)))
    }

    pub fn apply(&mut self, update: &SparseGradient, scale: f64) {
        let v = self.vocab_size();
        for (&state, row) in &update.rows {
            let base = state as usize * v;
            for (x, g) in self.logits[base..base + v].iter_mut().zip(row) {
                *x += scale * g;
            }
        }
    }
}

/// Writes `softmax(logits)` into `out`; returns `(log Z, entropy)` where
/// `log Z` is relative to the original logits.
fn softmax_entropy(logits: &[f64], out: &mut [f64]) -> (f64, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = (x - max).exp();
        z += *o;
    }
    let mut weighted = 0.0;
    for (o, &x) in out.iter_mut().zip(logits) {
        *o /= z;
        weighted += *o * (x - max);
    }
    let log_z = max + z.ln();
    let h = (z.ln() - weighted).max(0.0);
    (log_z, h)
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    softmax_entropy(logits, out);
}

pub fn entropy(params: &PolicyParams, state: u32) -> f64 {
    params.entropy(state)
}

/// Provenance of a sampled trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Source {
    pub iteration: usize,
    pub step: usize,
    pub sample: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub problem_id: String,
    pub tokens: Vec<Token>,
    pub states: Vec<u32>,
    pub step_logprobs: Vec<f64>,
    pub step_entropies: Vec<f64>,
    pub reward: u8,
    pub source: Source,
}

impl Trajectory {
    /// Builds a trajectory for an externally supplied token sequence,
    /// scoring it under `params`.
    pub fn from_tokens(
        params: &PolicyParams,
        problem: &Problem,
        tokens: Vec<Token>,
        source: Source,
    ) -> Result<Self> {
        check_tokens(&tokens, params.vocab_size())?;
        let states = params.spec.states_for(problem, &tokens);
        let mut p = vec![0.0; params.vocab_size()];
        let mut step_logprobs = Vec::with_capacity(tokens.len());
        let mut step_entropies = Vec::with_capacity(tokens.len());
        for (&s, &t) in states.iter().zip(&tokens) {
            let row = params.row(s);
            let (log_z, h) = softmax_entropy(row, &mut p);
            step_logprobs.push(row[t as usize] - log_z);
            step_entropies.push(h);
        }
        let reward = taskgen::verify(&params.spec.vocab, problem, &tokens);
        Ok(Trajectory {
            problem_id: problem.id.clone(),
            tokens,
            states,
            step_logprobs,
            step_entropies,
            reward,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mean_entropy(&self) -> f64 {
        if self.step_entropies.is_empty() {
            0.0
        } else {
            self.step_entropies.iter().sum::<f64>() / self.step_entropies.len() as f64
        }
    }
}

fn check_tokens(tokens: &[Token], vocab_size: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= vocab_size) {
        Some(&token) => Err(Error::TokenOutOfVocab { token, vocab_size }),
        None => Ok(()),
    }
}

/// Autoregressive categorical sampling until end-of-sequence or `max_len`.
pub fn sample_trajectory(
    params: &PolicyParams,
    problem: &Problem,
    rng: &mut StreamRng,
    max_len: usize,
    source: Source,
) -> Trajectory {
    let vocab = &params.spec.vocab;
    let eos = vocab.eos();
    let mut tracker = params.spec.tracker(problem);
    let mut p = vec![0.0; params.vocab_size()];
    let mut tokens = Vec::new();
    let mut states = Vec::new();
    let mut step_logprobs = Vec::new();
    let mut step_entropies = Vec::new();
    while tokens.len() < max_len {
        let s = tracker.state();
        let row = params.row(s);
        let (log_z, h) = softmax_entropy(row, &mut p);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut choice = p.len() - 1;
        for (i, &pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                choice = i;
                break;
            }
        }
        let token = choice as Token;
        states.push(s);
        tokens.push(token);
        step_logprobs.push(row[choice] - log_z);
        step_entropies.push(h);
        tracker.push(token);
        if token == eos {
            break;
        }
    }
    let reward = taskgen::verify(vocab, problem, &tokens);
    Trajectory {
        problem_id: problem.id.clone(),
        tokens,
        states,
        step_logprobs,
        step_entropies,
        reward,
        source,
    }
}

fn check_trajectory(params: &PolicyParams, traj: &Trajectory) -> Result<()> {
    check_tokens(&traj.tokens, params.vocab_size())?;
    if traj.states.len() != traj.tokens.len() {
        return Err(Error::ParamMismatch(
            "trajectory states and tokens differ in length".into(),
        ));
    }
    let n = params.state_count();
    if let Some(&s) = traj.states.iter().find(|&&s| s as usize >= n) {
        return Err(Error::ParamMismatch(format!(
            "state {s} outside a table of {n} states"
        )));
    }
    Ok(())
}

/// `log pi(tau)`: sum of per-token log-softmax values.
pub fn logprob(params: &PolicyParams, traj: &Trajectory) -> Result<f64> {
    check_trajectory(params, traj)?;
    let mut p = vec![0.0; params.vocab_size()];
    Ok(traj
        .states
        .iter()
        .zip(&traj.tokens)
        .map(|(&s, &t)| {
            let row = params.row(s);
            let (log_z, _) = softmax_entropy(row, &mut p);
            row[t as usize] - log_z
        })
        .sum())
}

/// Gradient restricted to the rows of visited states.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGradient {
    pub rows: BTreeMap<u32, Vec<f64>>,
    width: usize,
}

impl SparseGradient {
    pub fn new(width: usize) -> Self {
        SparseGradient {
            rows: BTreeMap::new(),
            width,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row_mut(&mut self, state: u32) -> &mut Vec<f64> {
        let w = self.width;
        self.rows.entry(state).or_insert_with(|| vec![0.0; w])
    }

    pub fn get(&self, state: u32, token: usize) -> f64 {
        self.rows.get(&state).map_or(0.0, |r| r[token])
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &SparseGradient, scale: f64) {
        if self.width == 0 {
            self.width = other.width;
        }
        for (&s, row) in &other.rows {
            let dst = self.row_mut(s);
            for (d, g) in dst.iter_mut().zip(row) {
                *d += scale * g;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.rows.values_mut() {
            for g in row {
                *g *= factor;
            }
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.values().flatten().copied()
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|g| g == 0.0)
    }

    /// Dense copy over `states` rows.
    pub fn to_dense(&self, states: usize) -> Vec<f64> {
        let mut out = vec![0.0; states * self.width];
        for (&s, row) in &self.rows {
            out[s as usize * self.width..(s as usize + 1) * self.width].copy_from_slice(row);
        }
        out
    }
}

/// Accumulates `scale * grad log pi(tau)` into `acc`.
pub fn accumulate_grad_logprob(
    params: &PolicyParams,
    traj: &Trajectory,
    scale: f64,
    acc: &mut SparseGradient,
) -> Result<()> {
    check_trajectory(params, traj)?;
    if scale == 0.0 {
        return Ok(());
    }
    let mut p = vec![0.0; params.vocab_size()];
    for (&s, &t) in traj.states.iter().zip(&traj.tokens) {
        softmax_into(params.row(s), &mut p);
        let row = acc.row_mut(s);
        for (g, &pi) in row.iter_mut().zip(&p) {
            *g -= scale * pi;
        }
        row[t as usize] += scale;
    }
    Ok(())
}

/// Exact `grad log pi(tau)`: at each visited state, one-hot of the emitted
/// token minus the softmax, summed over the trajectory.
pub fn grad_logprob(params: &PolicyParams, traj: &Trajectory) -> Result<SparseGradient> {
    let mut g = SparseGradient::new(params.vocab_size());
    accumulate_grad_logprob(params, traj, 1.0, &mut g)?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{generate_problems, LenRange, TaskSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn setup(modulus: u32) -> (TaskSpec, Vec<Problem>, ContextSpec) {
        let spec = TaskSpec::new(modulus, LenRange::new(1, 2), LenRange::new(3, 4), 3);
        let set = generate_problems(&spec, 10).unwrap();
        let mut ctx = ContextSpec::new(modulus, spec.vocab.clone());
        ctx.position_buckets = 2;
        ctx.position_bucket_width = 4;
        ctx.problem_buckets = 3;
        (spec, set.problems, ctx)
    }

    fn rng(seed: u64) -> StreamRng {
        StreamRng::seed_from_u64(seed)
    }

    fn src() -> Source {
        Source { iteration: 0, step: 0, sample: 0 }
    }

    #[test]
    fn zero_init_is_uniform() {
        let (_, _, ctx) = setup(5);
        let params = init_policy(&ctx, 1, 0.0, DEFAULT_STATE_BUDGET).unwrap();
        let v = params.vocab_size() as f64;
        for s in [0u32, 7, (params.state_count() - 1) as u32] {
            for p in params.probs(s) {
                assert!((p - 1.0 / v).abs() < 1e-15);
            }
            assert!((params.entropy(s) - v.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_deterministic_and_budgeted() {
        let (_, _, ctx) = setup(5);
        let a = init_policy(&ctx, 9, 0.01, DEFAULT_STATE_BUDGET).unwrap();
        let b = init_policy(&ctx, 9, 0.01, DEFAULT_STATE_BUDGET).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_policy(&ctx, 10, 0.01, DEFAULT_STATE_BUDGET).unwrap());
        assert!(matches!(
            init_policy(&ctx, 9, 0.0, 10),
            Err(Error::StateBudgetExceeded { .. })
        ));
    }

    #[test]
    fn states_are_in_range() {
        let (spec, problems, ctx) = setup(5);
        let n = ctx.state_count() as u32;
        let mut r = rng(0);
        for p in &problems {
            let seq: Vec<Token> = (0..30).map(|_| r.random_range(0..spec.vocab.len() as u16)).collect();
            assert!(ctx.states_for(p, &seq).iter().all(|&s| s < n));
        }
    }

    #[test]
    fn all_mass_on_eos_gives_length_one() {
        let (spec, problems, ctx) = setup(5);
        let mut params = init_policy(&ctx, 0, 0.0, DEFAULT_STATE_BUDGET).unwrap();
        let eos = spec.vocab.eos() as usize;
        let v = params.vocab_size();
        for s in 0..params.state_count() {
            params.logits[s * v + eos] = 1000.0;
        }
        let t = sample_trajectory(&params, &problems[0], &mut rng(1), 64, src());
        assert_eq!(t.tokens, vec![eos as Token]);
        assert_eq!(t.reward, 0);
    }

    #[test]
    fn uniform_single_token_logprob() {
        let (_, problems, ctx) = setup(5);
        let params = init_policy(&ctx, 0, 0.0, DEFAULT_STATE_BUDGET).unwrap();
        let t = sample_trajectory(&params, &problems[0], &mut rng(2), 1, src());
        assert_eq!(t.len(), 1);
        let v = params.vocab_size() as f64;
        assert!((t.step_logprobs[0] + v.ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_logprob_is_length_times_log_vocab() {
        let (spec, problems, ctx) = setup(5);
        let params = init_policy(&ctx, 0, 0.0, DEFAULT_STATE_BUDGET).unwrap();
        let toks = vec![0, 1, 2, 3, spec.vocab.eos()];
        let t = Trajectory::from_tokens(&params, &problems[1], toks, src()).unwrap();
        let lp = logprob(&params, &t).unwrap();
        assert!((lp + 5.0 * (params.vocab_size() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_vocab_tokens_rejected() {
        let (_, problems, ctx) = setup(5);
        let params = init_policy(&ctx, 0, 0.0, DEFAULT_STATE_BUDGET).unwrap();
        assert!(matches!(
            Trajectory::from_tokens(&params, &problems[0], vec![0, 999], src()),
            Err(Error::TokenOutOfVocab { token: 999, .. })
        ));
        let mut t = Trajectory::from_tokens(&params, &problems[0], vec![0, 1], src()).unwrap();
        t.tokens[1] = 500;
        assert!(logprob(&params, &t).is_err());
        assert!(grad_logprob(&params, &t).is_err());
    }

    #[test]
    fn sampling_frequencies_match_softmax() {
        // Two-step check at a fixed start state: 1e5 single-token draws,
        // every token within 3 sigma of its exact probability.
        let (_, problems, ctx) = setup(5);
        let mut params = init_policy(&ctx, 4, 0.0, DEFAULT_STATE_BUDGET).unwrap();
        let s0 = ctx.states_for(&problems[0], &[0])[0];
        for (i, x) in params.row_mut(s0).iter_mut().enumerate() {
            *x = (i as f64 * 0.37).sin() * 2.0;
        }
        let probs = params.probs(s0);
        let n = 100_000;
        let mut counts = vec![0usize; probs.len()];
        let mut r = rng(11);
        for _ in 0..n {
            let t = sample_trajectory(&params, &problems[0], &mut r, 1, src());
            counts[t.tokens[0] as usize] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{c} vs {p}");
        }
    }

    #[test]
    fn logprob_monotone_in_trajectory_logits() {
        // 3-token vocabulary by direct computation: raising every emitted
        // token's logit raises log pi(tau).
        let vocab = Vocabulary::from_kinds(vec![
            TokenKind::Digit(0),
            TokenKind::Digit(1),
            TokenKind::Answer,
            TokenKind::Eos,
        ])
        .unwrap();
        let ctx = ContextSpec::new(2, vocab);
        let chain = Chain { start: 0, steps: vec![(taskgen::Op::Add, 1)] };
        let problem = Problem {
            id: "p".into(),
            split: taskgen::Split::Train,
            prompt_tokens: vec![0, 1],
            target: 1,
            chain,
        };
        let mut params = init_policy(&ctx, 3, 0.5, DEFAULT_STATE_BUDGET).unwrap();
        let t = Trajectory::from_tokens(&params, &problem, vec![1, 2, 1, 3], src()).unwrap();
        let before = logprob(&params, &t).unwrap();
        let v = params.vocab_size();
        for (&s, &tok) in t.states.iter().zip(&t.tokens) {
            params.logits[s as usize * v + tok as usize] += 0.1;
        }
        assert!(logprob(&params, &t).unwrap() > before);
    }

    #[test]
    fn two_token_gradient_example() {
        let vocab = Vocabulary::from_kinds(vec![
            TokenKind::Digit(0),
            TokenKind::Digit(1),
            TokenKind::Answer,
            TokenKind::Eos,
        ])
        .unwrap();
        let ctx = ContextSpec::new(2, vocab);
        let params = init_policy(&ctx, 0, 0.0, DEFAULT_STATE_BUDGET).unwrap();
        let problem = Problem {
            id: "p".into(),
            split: taskgen::Split::Train,
            prompt_tokens: vec![0],
            target: 0,
            chain: Chain { start: 0, steps: vec![] },
        };
        let t = Trajectory::from_tokens(&params, &problem, vec![0], src()).unwrap();
        let g = grad_logprob(&params, &t).unwrap();
        let row = &g.rows[&t.states[0]];
        assert_eq!(row, &vec![0.75, -0.25, -0.25, -0.25]);

        // Two live tokens {a, b}, uniform between them: (+0.5, -0.5).
        let mut two = params.clone();
        let r = two.row_mut(t.states[0]);
        r[2] = -1e4;
        r[3] = -1e4;
        let g = grad_logprob(&two, &t).unwrap();
        let row = &g.rows[&t.states[0]];
        assert!((row[0] - 0.5).abs() < 1e-12 && (row[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn entropy_examples() {
        let vocab = Vocabulary::from_kinds(vec![
            TokenKind::Digit(0),
            TokenKind::Digit(1),
            TokenKind::Answer,
            TokenKind::Eos,
        ])
        .unwrap();
        let ctx = ContextSpec::new(2, vocab);
        let mut params = init_policy(&ctx, 0, 0.0, DEFAULT_STATE_BUDGET).unwrap();
        params.row_mut(0)[0] = 1000.0;
        assert!(params.entropy(0) < 1e-12);
        // two live tokens with logits (ln 3, 0): p = (0.75, 0.25)
        let row = params.row_mut(1);
        row[0] = 3f64.ln();
        row[1] = 0.0;
        row[2] = -1e4;
        row[3] = -1e4;
        let expected = -0.75 * 0.75f64.ln() - 0.25 * 0.25f64.ln();
        assert!((params.entropy(1) - expected).abs() < 1e-12);
    }

    fn random_case(seed: u64) -> (PolicyParams, Trajectory) {
        let (spec, problems, ctx) = setup(5);
        let params = init_policy(&ctx, seed, 2.0, DEFAULT_STATE_BUDGET).unwrap();
        let mut r = rng(seed);
        let p = &problems[(seed % problems.len() as u64) as usize];
        let len = r.random_range(1..12);
        let toks: Vec<Token> = (0..len).map(|_| r.random_range(0..spec.vocab.len() as u16)).collect();
        let t = Trajectory::from_tokens(&params, p, toks, src()).unwrap();
        (params, t)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn softmax_normalized_and_entropy_bounded(seed in 0u64..10_000, state in 0u32..500) {
            let (_, _, ctx) = setup(5);
            let params = init_policy(&ctx, seed, 5.0, DEFAULT_STATE_BUDGET).unwrap();
            let s = state % params.state_count() as u32;
            let sum: f64 = params.probs(s).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            let h = params.entropy(s);
            prop_assert!(h >= 0.0 && h <= (params.vocab_size() as f64).ln() + 1e-12);
        }

        #[test]
        fn sampled_trajectory_invariants(seed in 0u64..10_000) {
            let (spec, problems, ctx) = setup(5);
            let params = init_policy(&ctx, seed, 1.0, DEFAULT_STATE_BUDGET).unwrap();
            let p = &problems[(seed % problems.len() as u64) as usize];
            let t = sample_trajectory(&params, p, &mut rng(seed), 20, src());
            let again = sample_trajectory(&params, p, &mut rng(seed), 20, src());
            prop_assert_eq!(&t, &again);
            prop_assert!(t.len() <= 20);
            prop_assert!(t.tokens.last() == Some(&spec.vocab.eos()) || t.len() == 20);
            prop_assert_eq!(t.reward, taskgen::verify(&spec.vocab, p, &t.tokens));
            let ln_v = (params.vocab_size() as f64).ln();
            prop_assert!(t.step_logprobs.iter().all(|&l| l <= 0.0));
            prop_assert!(t.step_entropies.iter().all(|&h| (0.0..=ln_v + 1e-12).contains(&h)));
            let lp = logprob(&params, &t).unwrap();
            prop_assert!((lp - t.step_logprobs.iter().sum::<f64>()).abs() < 1e-9);
        }

        #[test]
        fn gradient_rows_sum_to_zero(seed in 0u64..10_000) {
            let (params, t) = random_case(seed);
            let g = grad_logprob(&params, &t).unwrap();
            for row in g.rows.values() {
                prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
            }
        }
    }
}
