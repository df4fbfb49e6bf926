//! Base policy: a short supervised warm-up on a corpus drawn from its own
//! seed stream, disjoint from the task's problem sets.
//!
//! Warm-up targets are step-by-step solutions in which each written digit
//! is replaced by a uniform random digit with probability `digit_noise`.
//! At `digit_noise = 1` the base learns only the output format; lower
//! values leak partial arithmetic competence into `theta_0`.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{accumulate_grad_logprob, init_policy, ContextSpec, Origin, PolicyParams, SparseGradient, Trajectory, Source};
use crate::seed;
use crate::taskgen::{gold_solution, Chain, LenRange, Op, Problem, Split, TaskSpec, TokenKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmupConfig {
    pub examples: usize,
    pub chain_len: LenRange,
    pub digit_noise: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub minibatch_size: usize,
    /// Uniform init noise on the logit table before warm-up.
    pub init_noise: f64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            examples: 400,
            chain_len: LenRange::new(1, 3),
            digit_noise: 0.5,
            epochs: 1,
            learning_rate: 1.0,
            minibatch_size: 16,
            init_noise: 0.0,
        }
    }
}

impl WarmupConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.digit_noise) {
            return bad("digit_noise must be in [0, 1]");
        }
        if self.chain_len.min == 0 || self.chain_len.min > self.chain_len.max {
            return bad("warm-up chain_len must be a non-empty range of positive lengths");
        }
        if self.minibatch_size == 0 {
            return bad("warm-up minibatch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("warm-up learning_rate must be positive and finite");
        }
        if !(self.init_noise >= 0.0 && self.init_noise.is_finite()) {
            return bad("init_noise must be finite and non-negative");
        }
        Ok(())
    }
}

fn corpus(task: &TaskSpec, cfg: &WarmupConfig, seed: u64) -> Vec<(Problem, Vec<u16>)> {
    let mut rng = seed::stream(seed, &[seed::STREAM_WARMUP]);
    let m = task.modulus;
    let vocab = &task.vocab;
    (0..cfg.examples)
        .map(|k| {
            let len = rng.random_range(cfg.chain_len.min..=cfg.chain_len.max);
            let chain = Chain {
                start: rng.random_range(0..m),
                steps: (0..len)
                    .map(|_| {
                        let op = *task.operator_set.choose(&mut rng).unwrap_or(&Op::Add);
                        (op, rng.random_range(0..m))
                    })
                    .collect(),
            };
            let problem = Problem {
                id: format!("warmup-{k:05}"),
                split: Split::Train,
                prompt_tokens: crate::taskgen::render_chain(vocab, &chain, m),
                target: chain.evaluate(m),
                chain,
            };
            let mut tokens = gold_solution(vocab, &problem, m);
            // the digit after ANS copies the last written value
            let mut last = None;
            let n = tokens.len();
            for i in 0..n {
                let is_answer_digit = i > 0 && tokens[i - 1] == vocab.answer();
                if vocab.digit_value(tokens[i]).is_none() {
                    continue;
                }
                if is_answer_digit {
                    if let Some(d) = last {
                        tokens[i] = d;
                    }
                } else if rng.random::<f64>() < cfg.digit_noise {
                    let d = rng.random_range(0..m);
                    tokens[i] = vocab.id(TokenKind::Digit(d)).expect("digit in vocabulary");
                    last = Some(tokens[i]);
                } else {
                    last = Some(tokens[i]);
                }
            }
            (problem, tokens)
        })
        .collect()
}

/// `theta_0`: the warm-up fit of a fresh table.
pub fn warm_start(ctx: &ContextSpec, task: &TaskSpec, cfg: &WarmupConfig, seed: u64, budget: usize) -> Result<PolicyParams> {
    cfg.validate()?;
    let mut params = init_policy(ctx, seed, cfg.init_noise, budget)?;
    let data = corpus(task, cfg, seed);
    let src = Source { iteration: 0, step: 0, sample: 0 };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = seed::stream(seed, &[seed::STREAM_WARMUP, seed::STREAM_SHUFFLE, epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            let mut g = SparseGradient::new(params.vocab_size());
            for &i in chunk {
                let (p, toks) = &data[i];
                let t = Trajectory::from_tokens(&params, p, toks.clone(), src)?;
                accumulate_grad_logprob(&params, &t, 1.0, &mut g)?;
            }
            params.apply(&g, cfg.learning_rate / chunk.len() as f64);
        }
    }
    if !params.all_finite() {
        return Err(Error::NonFiniteLoss { epoch: cfg.epochs.saturating_sub(1), minibatch: 0 });
    }
    params.version.origin = if cfg.epochs > 0 && cfg.examples > 0 { Origin::Warmup } else { Origin::Init };
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::DEFAULT_STATE_BUDGET;
    use crate::taskgen::{verify, LenRange};

    #[test]
    fn noiseless_corpus_is_gold_and_noisy_corpus_keeps_format() {
        let task = TaskSpec::new(7, LenRange::new(1, 2), LenRange::new(3, 3), 1);
        let clean = WarmupConfig { digit_noise: 0.0, examples: 50, ..WarmupConfig::default() };
        for (p, t) in corpus(&task, &clean, 3) {
            assert_eq!(verify(&task.vocab, &p, &t), 1);
        }
        let noisy = WarmupConfig { digit_noise: 1.0, examples: 50, ..WarmupConfig::default() };
        for (p, t) in corpus(&task, &noisy, 3) {
            assert_eq!(t.len(), 2 * p.chain.len() + 3);
            assert_eq!(*t.last().unwrap(), task.vocab.eos());
        }
    }

    #[test]
    fn warm_start_is_deterministic_and_an_iteration_start() {
        let task = TaskSpec::new(5, LenRange::new(1, 2), LenRange::new(3, 3), 1);
        let ctx = ContextSpec::new(5, task.vocab.clone());
        let cfg = WarmupConfig { examples: 40, ..WarmupConfig::default() };
        let a = warm_start(&ctx, &task, &cfg, 9, DEFAULT_STATE_BUDGET).unwrap();
        let b = warm_start(&ctx, &task, &cfg, 9, DEFAULT_STATE_BUDGET).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.version.origin, Origin::Warmup);
        assert!(a.version.is_iteration_start());
        let c = warm_start(&ctx, &task, &cfg, 10, DEFAULT_STATE_BUDGET).unwrap();
        assert_ne!(a.logits, c.logits);
    }
}
