//! Exploitation phase: rejection-sampling fine-tuning.
//!
//! Successful trajectories from an iteration's RL cache (optionally only
//! those of hard problems) are fitted by maximum likelihood, starting from
//! the policy the iteration *started* from.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{accumulate_grad_logprob, logprob, Origin, PolicyParams, SparseGradient, Trajectory};
use crate::rl::write_cache_jsonl;
use crate::seed;
use crate::taskgen::{verify, Problem};

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertDataset {
    pub source_iteration: usize,
    pub trajectories: Vec<Trajectory>,
    pub per_problem: BTreeMap<String, usize>,
}

impl ExpertDataset {
    fn from_sorted(source_iteration: usize, trajectories: Vec<Trajectory>) -> Self {
        let mut per_problem = BTreeMap::new();
        for t in &trajectories {
            *per_problem.entry(t.problem_id.clone()).or_insert(0) += 1;
        }
        ExpertDataset {
            source_iteration,
            trajectories,
            per_problem,
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Re-runs the verifier on every member.
    pub fn reverify<'a>(&self, lookup: impl Fn(&str) -> Option<&'a Problem>, vocab: &crate::taskgen::Vocabulary) -> bool {
        self.trajectories.iter().all(|t| {
            lookup(&t.problem_id).is_some_and(|p| verify(vocab, p, &t.tokens) == 1)
        })
    }

    pub fn write_jsonl<W: Write>(&self, w: W) -> Result<()> {
        write_cache_jsonl(&self.trajectories, w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HardnessFilter {
    pub success_rate_threshold: f64,
    /// Cap on successful trajectories kept per problem.
    pub per_problem_cap: Option<usize>,
}

impl Default for HardnessFilter {
    fn default() -> Self {
        HardnessFilter {
            success_rate_threshold: 0.10,
            per_problem_cap: None,
        }
    }
}

impl HardnessFilter {
    pub fn validate(&self) -> Result<()> {
        let t = self.success_rate_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "success_rate_threshold must be in (0, 1], got {t}"
            )));
        }
        if self.per_problem_cap == Some(0) {
            return Err(Error::InvalidConfig("per_problem_cap must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RFTConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub shuffle_seed: u64,
    /// Keep only cache entries from every `step_stride`-th RL step
    /// (counting from the last); 1 uses the full cache.
    pub step_stride: usize,
}

impl Default for RFTConfig {
    fn default() -> Self {
        RFTConfig {
            learning_rate: 1.0,
            epochs: 1,
            minibatch_size: 32,
            shuffle_seed: 0,
            step_stride: 1,
        }
    }
}

impl RFTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("RFT epochs must be >= 1");
        }
        if self.minibatch_size == 0 {
            return bad("minibatch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("RFT learning_rate must be positive and finite");
        }
        if self.step_stride == 0 {
            return bad("step_stride must be >= 1");
        }
        Ok(())
    }
}

/// `(successes, samples)` per problem over the whole cache.
pub fn success_counts(cache: &[Trajectory]) -> BTreeMap<String, (usize, usize)> {
    let mut out: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for t in cache {
        let e = out.entry(t.problem_id.clone()).or_insert((0, 0));
        e.0 += t.reward as usize;
        e.1 += 1;
    }
    out
}

fn sorted_successes(cache: &[Trajectory], keep: impl Fn(&Trajectory) -> bool) -> Vec<&Trajectory> {
    let mut out: Vec<&Trajectory> = cache.iter().filter(|t| t.reward == 1 && keep(t)).collect();
    out.sort_by(|a, b| {
        (a.source.step, &a.problem_id, a.source.sample).cmp(&(b.source.step, &b.problem_id, b.source.sample))
    });
    out
}

fn require_nonempty(cache: &[Trajectory]) -> Result<usize> {
    match cache.first() {
        Some(t) => Ok(t.source.iteration),
        None => Err(Error::Precondition("empty trajectory cache".into())),
    }
}

/// All reward-1 trajectories, ordered by (step, problem id, sample).
pub fn filter_successful(cache: &[Trajectory]) -> Result<ExpertDataset> {
    let iteration = require_nonempty(cache)?;
    let kept = sorted_successes(cache, |_| true).into_iter().cloned().collect();
    Ok(ExpertDataset::from_sorted(iteration, kept))
}

/// Successful trajectories of problems whose whole-cache success rate is
/// below the threshold. A threshold of 1.0 disables the filter.
pub fn filter_hard(cache: &[Trajectory], filter: &HardnessFilter) -> Result<ExpertDataset> {
    let iteration = require_nonempty(cache)?;
    filter.validate()?;
    if filter.success_rate_threshold >= 1.0 {
        return filter_successful(cache);
    }
    let counts = success_counts(cache);
    let hard = |t: &Trajectory| {
        let (s, n) = counts[&t.problem_id];
        (s as f64) / (n as f64) < filter.success_rate_threshold
    };
    let kept = sorted_successes(cache, hard).into_iter().cloned().collect();
    Ok(ExpertDataset::from_sorted(iteration, kept))
}

/// Keeps the first `cap` members of each problem in dataset order.
pub fn cap_per_problem(dataset: &ExpertDataset, cap: usize) -> ExpertDataset {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    let kept = dataset
        .trajectories
        .iter()
        .filter(|t| {
            let n = seen.entry(t.problem_id.as_str()).or_insert(0);
            *n += 1;
            *n <= cap
        })
        .cloned()
        .collect();
    ExpertDataset::from_sorted(dataset.source_iteration, kept)
}

/// Cache restricted to every `stride`-th step counting back from the last.
pub fn subsample_steps(cache: &[Trajectory], stride: usize) -> Vec<Trajectory> {
    if stride <= 1 {
        return cache.to_vec();
    }
    let last = cache.iter().map(|t| t.source.step).max().unwrap_or(0);
    cache
        .iter()
        .filter(|t| (last - t.source.step) % stride == 0)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertManifest {
    pub iteration: usize,
    pub threshold: f64,
    pub cache_size: usize,
    pub after_step_subsample: usize,
    pub successful: usize,
    pub hard: usize,
    /// No problem fell below the threshold; the successful set was used.
    pub fallback_to_successful: bool,
    pub per_problem_cap: Option<usize>,
    pub used: usize,
    pub problems_used: usize,
}

/// The filtering pipeline of one iteration: optional step subsampling, the
/// hardness filter with fallback to all successes, then the optional cap.
pub fn build_expert_dataset(
    cache: &[Trajectory],
    filter: &HardnessFilter,
    step_stride: usize,
) -> Result<(ExpertDataset, ExpertManifest)> {
    require_nonempty(cache)?;
    let pool = subsample_steps(cache, step_stride);
    let successful = filter_successful(&pool)?;
    let hard = filter_hard(&pool, filter)?;
    let fallback = hard.is_empty() && !successful.is_empty();
    let mut chosen = if fallback { successful.clone() } else { hard.clone() };
    if let Some(cap) = filter.per_problem_cap {
        chosen = cap_per_problem(&chosen, cap);
    }
    let manifest = ExpertManifest {
        iteration: chosen.source_iteration,
        threshold: filter.success_rate_threshold,
        cache_size: cache.len(),
        after_step_subsample: pool.len(),
        successful: successful.len(),
        hard: hard.len(),
        fallback_to_successful: fallback,
        per_problem_cap: filter.per_problem_cap,
        used: chosen.len(),
        problems_used: chosen.per_problem.len(),
    };
    Ok((chosen, manifest))
}

/// Mean negative log-likelihood of the dataset; 0 for an empty dataset.
pub fn rft_loss(params: &PolicyParams, dataset: &ExpertDataset) -> Result<f64> {
    nll(params, &dataset.trajectories.iter().collect::<Vec<_>>())
}

fn nll(params: &PolicyParams, batch: &[&Trajectory]) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for t in batch {
        sum -= logprob(params, t)?;
    }
    Ok(sum / batch.len() as f64)
}

/// `mean_tau grad log pi(tau)` over the dataset: the ascent direction of
/// the fine-tuning objective.
pub fn rft_gradient(params: &PolicyParams, dataset: &ExpertDataset) -> Result<SparseGradient> {
    let mut g = SparseGradient::new(params.vocab_size());
    for t in &dataset.trajectories {
        accumulate_grad_logprob(params, t, 1.0, &mut g)?;
    }
    if !dataset.is_empty() {
        g.scale(1.0 / dataset.len() as f64);
    }
    Ok(g)
}

/// `sum_tau R(tau) grad log pi(tau) / sum_tau R(tau)` over a raw cache with
/// binary rewards used as absolute weights.
pub fn reward_weighted_gradient(params: &PolicyParams, cache: &[Trajectory]) -> Result<SparseGradient> {
    let mut g = SparseGradient::new(params.vocab_size());
    let mut total = 0.0;
    for t in cache {
        let r = t.reward as f64;
        accumulate_grad_logprob(params, t, r, &mut g)?;
        total += r;
    }
    if total > 0.0 {
        g.scale(1.0 / total);
    }
    Ok(g)
}

#[derive(Debug, Clone)]
pub struct RftOutcome {
    pub params: PolicyParams,
    /// Empty dataset: parameters returned unchanged.
    pub degenerate: bool,
    /// Minibatch losses measured before each update.
    pub losses: Vec<f64>,
    pub updates: usize,
}

/// Fine-tunes `params_init` on the dataset. The input must be an
/// iteration-start policy; an RL-phase endpoint is rejected.
pub fn rft_epoch(params_init: &PolicyParams, dataset: &ExpertDataset, config: &RFTConfig) -> Result<RftOutcome> {
    config.validate()?;
    if !params_init.version.is_iteration_start() {
        return Err(Error::Precondition(format!(
            "fine-tuning must start from an iteration-start policy, got {:?}",
            params_init.version
        )));
    }
    if dataset.is_empty() {
        return Ok(RftOutcome {
            params: params_init.clone(),
            degenerate: true,
            losses: Vec::new(),
            updates: 0,
        });
    }
    let mut params = params_init.clone();
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut updates = 0usize;
    for epoch in 0..config.epochs {
        let mut rng = seed::stream(
            config.shuffle_seed,
            &[seed::STREAM_SHUFFLE, dataset.source_iteration as u64, epoch as u64],
        );
        order.shuffle(&mut rng);
        for (minibatch, chunk) in order.chunks(config.minibatch_size).enumerate() {
            let batch: Vec<&Trajectory> = chunk.iter().map(|&i| &dataset.trajectories[i]).collect();
            let loss = nll(&params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, minibatch });
            }
            losses.push(loss);
            let mut g = SparseGradient::new(params.vocab_size());
            for t in &batch {
                accumulate_grad_logprob(&params, t, 1.0, &mut g)?;
            }
            params.apply(&g, config.learning_rate / batch.len() as f64);
            updates += 1;
        }
    }
    if !params.all_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: config.epochs - 1,
            minibatch: updates.saturating_sub(1),
        });
    }
    params.version.iteration = params_init.version.iteration + 1;
    params.version.rl_step = 0;
    params.version.origin = Origin::Rft {
        from_iteration: params_init.version.iteration,
    };
    Ok(RftOutcome {
        params,
        degenerate: false,
        losses,
        updates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_policy, ContextSpec, Source, Version, DEFAULT_STATE_BUDGET};
    use crate::taskgen::{generate_problems, LenRange, Split, TaskSpec, TokenKind};
    use proptest::prelude::*;

    struct Fx {
        spec: TaskSpec,
        train: Vec<Problem>,
        params: PolicyParams,
    }

    fn fx() -> Fx {
        let spec = TaskSpec::new(5, LenRange::new(1, 2), LenRange::new(3, 3), 4);
        let set = generate_problems(&spec, 8).unwrap();
        let ctx = ContextSpec::new(5, spec.vocab.clone());
        let params = init_policy(&ctx, 2, 0.5, DEFAULT_STATE_BUDGET).unwrap();
        let train = set.problems.into_iter().filter(|p| p.split == Split::Train).collect();
        Fx { spec, train, params }
    }

    fn traj(f: &Fx, p: usize, correct: bool, step: usize, sample: usize) -> Trajectory {
        let prob = &f.train[p];
        let v = &f.spec.vocab;
        let d = if correct { prob.target } else { (prob.target + 1) % 5 };
        let toks = vec![v.answer(), v.id(TokenKind::Digit(d)).unwrap(), v.eos()];
        Trajectory::from_tokens(&f.params, prob, toks, Source { iteration: 0, step, sample }).unwrap()
    }

    fn cache_from(f: &Fx, spec: &[(usize, bool)]) -> Vec<Trajectory> {
        spec.iter().enumerate().map(|(k, &(p, ok))| traj(f, p, ok, k / 4, k % 4)).collect()
    }

    #[test]
    fn successful_filter_counts_and_reverifies() {
        let f = fx();
        let cache = cache_from(&f, &[(0, true), (1, false), (2, true), (0, false), (1, false)]);
        let d = filter_successful(&cache).unwrap();
        assert_eq!(d.len(), 2);
        assert!(d.reverify(|id| f.train.iter().find(|p| p.id == id), &f.spec.vocab));
        let zeros = cache_from(&f, &[(0, false), (1, false)]);
        assert!(filter_successful(&zeros).unwrap().is_empty());
        assert!(filter_successful(&[]).is_err());
    }

    #[test]
    fn hard_filter_rates() {
        let f = fx();
        // problem 0: 200 samples, 5 successes; problem 1: rate 0.5
        let mut spec = Vec::new();
        for k in 0..200 {
            spec.push((0, k % 40 == 0));
        }
        for k in 0..20 {
            spec.push((1, k % 2 == 0));
        }
        let cache = cache_from(&f, &spec);
        let hard = filter_hard(&cache, &HardnessFilter::default()).unwrap();
        assert_eq!(hard.len(), 5);
        assert_eq!(hard.per_problem.get(&f.train[0].id), Some(&5));
        assert!(!hard.per_problem.contains_key(&f.train[1].id));
        let all = HardnessFilter { success_rate_threshold: 1.0, ..HardnessFilter::default() };
        assert_eq!(filter_hard(&cache, &all).unwrap(), filter_successful(&cache).unwrap());
    }

    #[test]
    fn pipeline_falls_back_and_caps() {
        let f = fx();
        let cache = cache_from(&f, &[(0, true), (0, true), (0, false), (1, true), (1, true)]);
        let (d, m) = build_expert_dataset(&cache, &HardnessFilter::default(), 1).unwrap();
        assert!(m.fallback_to_successful);
        assert_eq!((m.successful, m.hard, m.used), (4, 0, 4));
        assert_eq!(d.len(), 4);
        let capped = HardnessFilter { per_problem_cap: Some(1), ..HardnessFilter::default() };
        let (d, m) = build_expert_dataset(&cache, &capped, 1).unwrap();
        assert_eq!((d.len(), m.problems_used), (2, 2));
    }

    #[test]
    fn step_subsampling_counts_back_from_last() {
        let f = fx();
        let cache: Vec<Trajectory> = (0..10).map(|s| traj(&f, 0, true, s, 0)).collect();
        let steps: Vec<usize> = subsample_steps(&cache, 3).iter().map(|t| t.source.step).collect();
        assert_eq!(steps, vec![0, 3, 6, 9]);
        assert_eq!(subsample_steps(&cache, 1).len(), 10);
    }

    #[test]
    fn loss_on_uniform_policy() {
        let f = fx();
        let ctx = f.params.spec.clone();
        let uniform = init_policy(&ctx, 0, 0.0, DEFAULT_STATE_BUDGET).unwrap();
        let cache = cache_from(&f, &[(0, true), (1, true), (2, true)]);
        let d = filter_successful(&cache).unwrap();
        let expect = 3.0 * (f.spec.vocab.len() as f64).ln();
        assert!((rft_loss(&uniform, &d).unwrap() - expect).abs() < 1e-12);
        assert!(rft_loss(&f.params, &d).unwrap() >= 0.0);
    }

    #[test]
    fn gradient_matches_reward_weighted_form() {
        let f = fx();
        let cache = cache_from(&f, &[(0, true), (1, false), (2, true), (3, false), (0, true)]);
        let d = filter_successful(&cache).unwrap();
        let a = rft_gradient(&f.params, &d).unwrap().to_dense(f.params.state_count());
        let b = reward_weighted_gradient(&f.params, &cache).unwrap().to_dense(f.params.state_count());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn epoch_requires_iteration_start_and_versions_output() {
        let f = fx();
        let cache = cache_from(&f, &[(0, true), (1, true)]);
        let d = filter_successful(&cache).unwrap();
        let mut rl_end = f.params.clone();
        rl_end.version = Version { iteration: 0, rl_step: 50, origin: Origin::Rl };
        assert!(matches!(rft_epoch(&rl_end, &d, &RFTConfig::default()), Err(Error::Precondition(_))));
        let out = rft_epoch(&f.params, &d, &RFTConfig::default()).unwrap();
        assert_eq!(out.params.version, Version { iteration: 1, rl_step: 0, origin: Origin::Rft { from_iteration: 0 } });
        assert!(out.params.version.is_iteration_start());
    }

    #[test]
    fn empty_dataset_is_a_no_op() {
        let f = fx();
        let d = filter_successful(&cache_from(&f, &[(0, false)])).unwrap();
        let out = rft_epoch(&f.params, &d, &RFTConfig::default()).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.params, f.params);
    }

    #[test]
    fn single_trajectory_likelihood_rises() {
        let f = fx();
        let d = filter_successful(&cache_from(&f, &[(1, true)])).unwrap();
        let cfg = RFTConfig { learning_rate: 1e-3, ..RFTConfig::default() };
        let out = rft_epoch(&f.params, &d, &cfg).unwrap();
        let t = &d.trajectories[0];
        assert!(logprob(&out.params, t).unwrap() > logprob(&f.params, t).unwrap());
    }

    #[test]
    fn minibatch_losses_trend_down_at_small_lr() {
        let f = fx();
        let spec: Vec<(usize, bool)> = (0..64).map(|k| (k % 3, true)).collect();
        let d = filter_successful(&cache_from(&f, &spec)).unwrap();
        let cfg = RFTConfig { learning_rate: 1e-3, minibatch_size: 4, epochs: 3, ..RFTConfig::default() };
        let out = rft_epoch(&f.params, &d, &cfg).unwrap();
        let before = rft_loss(&f.params, &d).unwrap();
        let after = rft_loss(&out.params, &d).unwrap();
        assert!(after < before);
        let first: f64 = out.losses[..8].iter().sum();
        let last: f64 = out.losses[out.losses.len() - 8..].iter().sum();
        assert!(last < first);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn filters_nest(bits in proptest::collection::vec((0usize..4, any::<bool>()), 1..60), thr in 0.01f64..1.0) {
            let f = fx();
            let cache = cache_from(&f, &bits);
            let hard = filter_hard(&cache, &HardnessFilter { success_rate_threshold: thr, per_problem_cap: None }).unwrap();
            let succ = filter_successful(&cache).unwrap();
            prop_assert!(hard.trajectories.iter().all(|t| succ.trajectories.contains(t)));
            prop_assert!(succ.trajectories.iter().all(|t| cache.contains(t) && t.reward == 1));
            prop_assert!(succ.reverify(|id| f.train.iter().find(|p| p.id == id), &f.spec.vocab));
        }
    }
}
