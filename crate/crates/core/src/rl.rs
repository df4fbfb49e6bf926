//! Exploration phase: group-relative REINFORCE.
//!
//! Each step draws `problems_per_step` training problems, samples a group of
//! `group_size` trajectories per problem, normalizes rewards within the
//! group into advantages and takes one ascent step along
//! `mean_k A_k * grad log pi(tau_k)`. There is no ratio clipping, KL term or
//! entropy bonus; every update is on-policy.

use std::io::Write;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::policy::{
    accumulate_grad_logprob, sample_trajectory, Origin, PolicyParams, Source, SparseGradient,
    Trajectory,
};
use crate::seed;
use crate::taskgen::Problem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RLConfig {
    pub group_size: usize,
    pub problems_per_step: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub checkpoint_every: usize,
    pub advantage_eps: f64,
    pub max_len: usize,
    /// Gradient norm above which a step counts toward collapse.
    pub collapse_threshold: f64,
    /// Consecutive steps above the threshold before a collapse is flagged.
    pub collapse_patience: usize,
}

impl Default for RLConfig {
    fn default() -> Self {
        RLConfig {
            group_size: 16,
            problems_per_step: 16,
            learning_rate: 1.0,
            steps: 200,
            checkpoint_every: 50,
            advantage_eps: 1e-6,
            max_len: 64,
            collapse_threshold: 50.0,
            collapse_patience: 3,
        }
    }
}

impl RLConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if self.steps == 0 {
            return bad("RL steps must be >= 1");
        }
        if self.problems_per_step == 0 {
            return bad("problems_per_step must be >= 1");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive and finite");
        }
        if !(self.advantage_eps > 0.0) {
            return bad("advantage_eps must be positive");
        }
        if self.max_len == 0 {
            return bad("max_len must be >= 1");
        }
        Ok(())
    }

    /// Steps (1-based) after which a snapshot is taken; the final step is
    /// always included.
    pub fn checkpoint_steps(&self) -> Vec<usize> {
        let mut out: Vec<usize> = (1..=self.steps)
            .filter(|s| s % self.checkpoint_every == 0)
            .collect();
        if out.last() != Some(&self.steps) {
            out.push(self.steps);
        }
        out
    }
}

/// `A_k = (R_k - mean R) / (std R + eps)` with the population standard
/// deviation; a group with identical rewards gets exactly zero advantages.
pub fn compute_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Precondition(format!(
            "advantages need a group of at least 2, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + eps;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub problem_id: String,
    pub trajectories: Vec<Trajectory>,
    pub advantages: Vec<f64>,
}

impl GroupBatch {
    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.reward as f64).collect()
    }

    pub fn is_zero_advantage(&self) -> bool {
        self.advantages.iter().all(|&a| a == 0.0)
    }

    /// `sum_k A_k * grad log pi(tau_k)`.
    pub fn gradient(&self, params: &PolicyParams) -> Result<SparseGradient> {
        let mut g = SparseGradient::new(params.vocab_size());
        for (t, &a) in self.trajectories.iter().zip(&self.advantages) {
            accumulate_grad_logprob(params, t, a, &mut g)?;
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub iteration: usize,
    /// 1-based step within the phase.
    pub step: usize,
    pub mean_train_reward: f64,
    pub mean_token_entropy: f64,
    pub grad_norm: f64,
    pub fraction_zero_advantage_groups: f64,
    /// Set once the gradient norm has exceeded the collapse threshold for
    /// `collapse_patience` consecutive steps.
    pub collapse_flag: bool,
}

/// Euclidean norm over every coordinate of a sparse update. Non-finite
/// entries are reported as an error, distinct from a large finite norm.
pub fn grad_global_norm(update: &SparseGradient) -> Result<f64> {
    let mut sum = 0.0;
    for (&state, row) in &update.rows {
        for (token, &g) in row.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { state, token });
            }
            sum += g * g;
        }
    }
    Ok(sum.sqrt())
}

/// Everything produced by one update.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub params: PolicyParams,
    pub stats: StepStats,
    pub groups: Vec<GroupBatch>,
    /// The assembled update before the learning rate.
    pub update: SparseGradient,
}

/// Seed address of one step's randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepSeed {
    pub master: u64,
    pub iteration: usize,
    /// 0-based step within the phase.
    pub step: usize,
}

impl StepSeed {
    fn group_stream(&self, group: usize) -> seed::StreamRng {
        seed::stream(
            self.master,
            &[seed::STREAM_ROLLOUT, self.iteration as u64, self.step as u64, group as u64],
        )
    }
}

/// One group-relative policy-gradient step on `batch` (train problems).
pub fn rl_step(
    params: &PolicyParams,
    batch: &[&Problem],
    config: &RLConfig,
    seed: StepSeed,
) -> Result<StepOutcome> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::Precondition("empty problem batch".into()));
    }
    let sampled: Vec<Result<(GroupBatch, SparseGradient)>> = par::map_indexed(batch, |g, problem| {
        let mut rng = seed.group_stream(g);
        let trajectories: Vec<Trajectory> = (0..config.group_size)
            .map(|k| {
                let source = Source {
                    iteration: seed.iteration,
                    step: seed.step,
                    sample: k,
                };
                sample_trajectory(params, problem, &mut rng, config.max_len, source)
            })
            .collect();
        let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward as f64).collect();
        let advantages = compute_advantages(&rewards, config.advantage_eps)?;
        let group = GroupBatch {
            problem_id: problem.id.clone(),
            trajectories,
            advantages,
        };
        let grad = group.gradient(params)?;
        Ok((group, grad))
    });

    // Reduce in fixed problem order.
    let mut update = SparseGradient::new(params.vocab_size());
    let mut groups = Vec::with_capacity(batch.len());
    for item in sampled {
        let (group, grad) = item?;
        update.add_scaled(&grad, 1.0);
        groups.push(group);
    }
    let n_traj = (batch.len() * config.group_size) as f64;
    update.scale(1.0 / n_traj);

    let grad_norm = match grad_global_norm(&update) {
        Ok(n) => n,
        Err(_) => {
            return Err(Error::TrainingCollapse {
                step: seed.step + 1,
                norm: f64::NAN,
            })
        }
    };

    let mut next = params.clone();
    next.apply(&update, config.learning_rate);
    next.version.rl_step = params.version.rl_step + 1;
    next.version.origin = Origin::Rl;
    if !next.all_finite() {
        return Err(Error::TrainingCollapse {
            step: seed.step + 1,
            norm: grad_norm,
        });
    }

    let (mut reward_sum, mut ent_sum, mut tokens) = (0.0, 0.0, 0usize);
    for g in &groups {
        for t in &g.trajectories {
            reward_sum += t.reward as f64;
            ent_sum += t.step_entropies.iter().sum::<f64>();
            tokens += t.len();
        }
    }
    let stats = StepStats {
        iteration: seed.iteration,
        step: seed.step + 1,
        mean_train_reward: reward_sum / n_traj,
        mean_token_entropy: if tokens == 0 { 0.0 } else { ent_sum / tokens as f64 },
        grad_norm,
        fraction_zero_advantage_groups: groups.iter().filter(|g| g.is_zero_advantage()).count()
            as f64
            / groups.len() as f64,
        collapse_flag: false,
    };
    Ok(StepOutcome {
        params: next,
        stats,
        groups,
        update,
    })
}

/// Problems for step `step` of `iteration`: a uniform draw without
/// replacement (with replacement only if the pool is smaller than the batch).
pub fn draw_batch<'a>(
    train: &[&'a Problem],
    per_step: usize,
    master: u64,
    iteration: usize,
    step: usize,
) -> Vec<&'a Problem> {
    let mut rng = seed::stream(master, &[seed::STREAM_BATCH, iteration as u64, step as u64]);
    if per_step <= train.len() {
        index::sample(&mut rng, train.len(), per_step)
            .into_iter()
            .map(|i| train[i])
            .collect()
    } else {
        use rand::Rng;
        (0..per_step)
            .map(|_| train[rng.random_range(0..train.len())])
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RLPhaseResult {
    pub iteration: usize,
    pub final_params: PolicyParams,
    /// Snapshots in step order, tagged by their 1-based step.
    pub checkpoints: Vec<PolicyParams>,
    /// Every sampled trajectory, in (step, problem, sample) order.
    pub cache: Vec<Trajectory>,
    pub stats: Vec<StepStats>,
}

impl RLPhaseResult {
    pub fn total_trajectories(&self) -> usize {
        self.cache.len()
    }
}

/// A phase that stopped early; `partial` holds everything up to the last
/// completed step.
#[derive(Debug)]
pub struct PhaseFailure {
    pub partial: Box<RLPhaseResult>,
    pub error: Error,
}

/// Runs `config.steps` RL steps from `params_init` on the training pool.
pub fn run_rl_phase(
    params_init: &PolicyParams,
    train: &[&Problem],
    config: &RLConfig,
    master_seed: u64,
    iteration: usize,
) -> std::result::Result<RLPhaseResult, PhaseFailure> {
    let mut result = RLPhaseResult {
        iteration,
        final_params: params_init.clone(),
        checkpoints: Vec::new(),
        cache: Vec::new(),
        stats: Vec::new(),
    };
    let fail = |result: RLPhaseResult, error: Error| PhaseFailure {
        partial: Box::new(result),
        error,
    };
    if let Err(e) = config.validate() {
        return Err(fail(result, e));
    }
    if train.is_empty() {
        return Err(fail(result, Error::Precondition("empty training pool".into())));
    }
    let snapshot_at = config.checkpoint_steps();
    let mut params = params_init.clone();
    params.version.iteration = iteration;
    params.version.rl_step = 0;
    let mut above = 0usize;
    for step in 0..config.steps {
        let batch = draw_batch(train, config.problems_per_step, master_seed, iteration, step);
        let seed = StepSeed {
            master: master_seed,
            iteration,
            step,
        };
        let outcome = match rl_step(&params, &batch, config, seed) {
            Ok(o) => o,
            Err(e) => {
                result.final_params = params;
                return Err(fail(result, e));
            }
        };
        let mut stats = outcome.stats;
        if stats.grad_norm > config.collapse_threshold {
            above += 1;
        } else {
            above = 0;
        }
        stats.collapse_flag = above >= config.collapse_patience;
        result.stats.push(stats);
        result
            .cache
            .extend(outcome.groups.into_iter().flat_map(|g| g.trajectories));
        params = outcome.params;
        if snapshot_at.contains(&(step + 1)) {
            result.checkpoints.push(params.clone());
        }
    }
    result.final_params = params;
    Ok(result)
}

/// Stats series as CSV.
pub fn write_stats_csv<W: Write>(stats: &[StepStats], mut w: W) -> Result<()> {
    writeln!(
        w,
        "step,mean_train_reward,mean_token_entropy,grad_norm,fraction_zero_advantage_groups"
    )?;
    for s in stats {
        writeln!(
            w,
            "{},{},{},{},{}",
            s.step,
            s.mean_train_reward,
            s.mean_token_entropy,
            s.grad_norm,
            s.fraction_zero_advantage_groups
        )?;
    }
    Ok(())
}

/// Line-delimited trajectory cache record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub iteration: usize,
    pub step: usize,
    pub problem_id: String,
    pub tokens: Vec<u16>,
    pub reward: u8,
    pub logprob: f64,
}

impl From<&Trajectory> for CacheRecord {
    fn from(t: &Trajectory) -> Self {
        CacheRecord {
            iteration: t.source.iteration,
            step: t.source.step,
            problem_id: t.problem_id.clone(),
            tokens: t.tokens.clone(),
            reward: t.reward,
            logprob: t.step_logprobs.iter().sum(),
        }
    }
}

pub fn write_cache_jsonl<'a, W: Write>(
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
    mut w: W,
) -> Result<()> {
    for t in trajectories {
        serde_json::to_writer(&mut w, &CacheRecord::from(t))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{grad_logprob, init_policy, logprob, ContextSpec, DEFAULT_STATE_BUDGET};
    use crate::taskgen::{generate_problems, LenRange, Split, TaskSpec};
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6)
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(compute_advantages(&[1.0; 4], 1e-6).unwrap(), vec![0.0; 4]);
        assert!(close(&compute_advantages(&[1.0, 0.0], 1e-12).unwrap(), &[1.0, -1.0]));
        assert!(close(
            &compute_advantages(&[1.0, 0.0, 0.0, 1.0], 1e-12).unwrap(),
            &[1.0, -1.0, -1.0, 1.0]
        ));
        assert!(compute_advantages(&[1.0], 1e-6).is_err());
    }

    #[test]
    fn global_norm() {
        let mut g = SparseGradient::new(2);
        assert_eq!(grad_global_norm(&g).unwrap(), 0.0);
        g.row_mut(0)[0] = 3.0;
        g.row_mut(5)[1] = 4.0;
        assert_eq!(grad_global_norm(&g).unwrap(), 5.0);
        let mut h = g.clone();
        h.scale(-2.5);
        assert!((grad_global_norm(&h).unwrap() - 12.5).abs() < 1e-12);
        g.row_mut(1)[1] = f64::NAN;
        assert!(matches!(grad_global_norm(&g), Err(Error::NonFiniteGradient { state: 1, token: 1 })));
    }

    #[test]
    fn checkpoint_cadence() {
        let c = RLConfig { steps: 200, checkpoint_every: 50, ..RLConfig::default() };
        assert_eq!(c.checkpoint_steps(), vec![50, 100, 150, 200]);
        let c = RLConfig { steps: 55, checkpoint_every: 20, ..RLConfig::default() };
        assert_eq!(c.checkpoint_steps(), vec![20, 40, 55]);
        assert!(RLConfig { steps: 0, ..RLConfig::default() }.validate().is_err());
        assert!(RLConfig { group_size: 1, ..RLConfig::default() }.validate().is_err());
    }

    fn fixture() -> (TaskSpec, Vec<Problem>, PolicyParams) {
        let spec = TaskSpec::new(3, LenRange::new(1, 1), LenRange::new(2, 2), 1);
        let set = generate_problems(&spec, 6).unwrap();
        let ctx = ContextSpec::new(3, spec.vocab.clone());
        let params = init_policy(&ctx, 0, 0.0, DEFAULT_STATE_BUDGET).unwrap();
        let train = set.problems.into_iter().filter(|p| p.split == Split::Train).collect();
        (spec, train, params)
    }

    #[test]
    fn uniform_rewards_give_zero_update() {
        // An all-EOS policy never succeeds: every group has identical rewards.
        let (spec, train, mut params) = fixture();
        let v = params.vocab_size();
        let eos = spec.vocab.eos() as usize;
        for s in 0..params.state_count() {
            params.logits[s * v + eos] = 50.0;
        }
        let batch: Vec<&Problem> = train.iter().collect();
        let cfg = RLConfig { group_size: 4, problems_per_step: batch.len(), ..RLConfig::default() };
        let out = rl_step(&params, &batch, &cfg, StepSeed { master: 1, iteration: 0, step: 0 }).unwrap();
        assert!(out.update.is_zero());
        assert_eq!(out.params.logits, params.logits);
        assert_eq!(out.stats.fraction_zero_advantage_groups, 1.0);
        assert_eq!(out.stats.grad_norm, 0.0);
    }

    #[test]
    fn two_sample_group_direction() {
        // One group, rewards [1, 0], G = 2: the update is proportional to
        // grad log pi(success) - grad log pi(failure).
        let (spec, train, params) = fixture();
        let p = &train[0];
        let ans = spec.vocab.answer();
        let eos = spec.vocab.eos();
        let good = vec![spec.vocab.id(crate::taskgen::TokenKind::Digit(p.target)).unwrap()];
        let win = Trajectory::from_tokens(&params, p, [vec![ans], good, vec![eos]].concat(), Source { iteration: 0, step: 0, sample: 0 }).unwrap();
        let lose = Trajectory::from_tokens(&params, p, vec![eos], Source { iteration: 0, step: 0, sample: 1 }).unwrap();
        assert_eq!((win.reward, lose.reward), (1, 0));
        let adv = compute_advantages(&[1.0, 0.0], 1e-6).unwrap();
        let group = GroupBatch { problem_id: p.id.clone(), trajectories: vec![win.clone(), lose.clone()], advantages: adv.clone() };
        let g = group.gradient(&params).unwrap();
        let mut expected = grad_logprob(&params, &win).unwrap();
        expected.add_scaled(&grad_logprob(&params, &lose).unwrap(), -1.0);
        let n = params.state_count();
        let (gd, ed) = (g.to_dense(n), expected.to_dense(n));
        let scale = adv[0];
        assert!(scale > 0.0);
        for (a, b) in gd.iter().zip(&ed) {
            assert!((a - scale * b).abs() < 1e-12);
        }
    }

    #[test]
    fn small_step_moves_logprobs_in_reward_direction() {
        let (spec, train, params) = fixture();
        let p = &train[1];
        let digit = |d| spec.vocab.id(crate::taskgen::TokenKind::Digit(d)).unwrap();
        let (ans, eos) = (spec.vocab.answer(), spec.vocab.eos());
        let src = |k| Source { iteration: 0, step: 0, sample: k };
        let win = Trajectory::from_tokens(&params, p, vec![ans, digit(p.target), eos], src(0)).unwrap();
        let losers: Vec<Trajectory> = (1..4)
            .map(|k| {
                let wrong = (p.target + k as u32) % 3;
                let toks = if wrong == p.target { vec![eos] } else { vec![ans, digit(wrong), eos] };
                Trajectory::from_tokens(&params, p, toks, src(k)).unwrap()
            })
            .collect();
        let mut trajs = vec![win.clone()];
        trajs.extend(losers.iter().cloned());
        let rewards: Vec<f64> = trajs.iter().map(|t| t.reward as f64).collect();
        assert_eq!(rewards, vec![1.0, 0.0, 0.0, 0.0]);
        let group = GroupBatch { problem_id: p.id.clone(), advantages: compute_advantages(&rewards, 1e-6).unwrap(), trajectories: trajs };
        let mut g = group.gradient(&params).unwrap();
        g.scale(1.0 / 4.0);
        let mut next = params.clone();
        next.apply(&g, 1e-3);
        assert!(logprob(&next, &win).unwrap() > logprob(&params, &win).unwrap());
        for l in &losers {
            assert!(logprob(&next, l).unwrap() < logprob(&params, l).unwrap());
        }
    }

    #[test]
    fn phase_caches_everything_and_is_deterministic() {
        let (_, train, params) = fixture();
        let pool: Vec<&Problem> = train.iter().collect();
        let cfg = RLConfig {
            group_size: 3,
            problems_per_step: 2,
            steps: 7,
            checkpoint_every: 3,
            max_len: 8,
            learning_rate: 0.5,
            ..RLConfig::default()
        };
        let a = run_rl_phase(&params, &pool, &cfg, 9, 0).unwrap();
        assert_eq!(a.cache.len(), 7 * 2 * 3);
        assert_eq!(a.stats.len(), 7);
        let steps: Vec<usize> = a.checkpoints.iter().map(|c| c.version.rl_step).collect();
        assert_eq!(steps, vec![3, 6, 7]);
        let b = run_rl_phase(&params, &pool, &cfg, 9, 0).unwrap();
        assert_eq!(a.final_params, b.final_params);
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        write_stats_csv(&a.stats, &mut ca).unwrap();
        write_stats_csv(&b.stats, &mut cb).unwrap();
        assert_eq!(ca, cb);
        assert!(String::from_utf8(ca).unwrap().starts_with(
            "step,mean_train_reward,mean_token_entropy,grad_norm,fraction_zero_advantage_groups\n1,"
        ));
        let zero = RLConfig { steps: 0, ..cfg };
        assert!(run_rl_phase(&params, &pool, &zero, 9, 0).is_err());
    }

    #[test]
    fn non_finite_parameters_are_a_collapse() {
        let (_, train, mut params) = fixture();
        params.logits[0] = f64::NAN;
        let batch: Vec<&Problem> = train.iter().collect();
        let cfg = RLConfig { group_size: 2, problems_per_step: batch.len(), ..RLConfig::default() };
        let r = rl_step(&params, &batch, &cfg, StepSeed { master: 3, iteration: 0, step: 4 });
        assert!(matches!(r, Err(Error::TrainingCollapse { step: 5, .. })));
    }

    proptest! {
        #[test]
        fn advantages_are_mean_centered(bits in proptest::collection::vec(0u8..2, 2..40)) {
            let r: Vec<f64> = bits.iter().map(|&b| b as f64).collect();
            let a = compute_advantages(&r, 1e-6).unwrap();
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
            if bits.iter().all(|&b| b == bits[0]) {
                prop_assert!(a.iter().all(|&x| x == 0.0));
            }
        }
    }
}
