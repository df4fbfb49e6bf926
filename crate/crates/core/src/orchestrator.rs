//! The iterative loop and its matched-budget baseline.
//!
//! `run_rloop` alternates an RL exploration phase from `theta_i`, expert
//! filtering, and fine-tuning of `theta_i` itself into `theta_{i+1}`.
//! `run_vanilla` runs the same total number of RL steps in one phase.
//! Both evaluate every RL checkpoint on the two validation splits with
//! seeds addressed by global step, so paired runs share evaluation noise
//! wherever their policies coincide.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::analysis::{evaluate_checkpoint, CheckpointMetrics, SolveSlice, SolveTable};
use crate::error::{Error, Result};
use crate::policy::{PolicyParams, Trajectory, Version};
use crate::rft::{build_expert_dataset, rft_epoch, ExpertDataset, ExpertManifest, HardnessFilter, RFTConfig};
use crate::rl::{run_rl_phase, write_cache_jsonl, RLConfig, StepStats};
use crate::seed;
use crate::taskgen::{Problem, ProblemSet, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMetric {
    AvgAtN,
    PassAtK(usize),
}

impl fmt::Display for SelectionMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionMetric::AvgAtN => write!(f, "avg@N"),
            SelectionMetric::PassAtK(k) => write!(f, "pass@{k}"),
        }
    }
}

impl FromStr for SelectionMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if lower == "avg@n" || lower == "avg" {
            return Ok(SelectionMetric::AvgAtN);
        }
        match lower.strip_prefix("pass@").map(str::parse::<usize>) {
            Some(Ok(k)) if k >= 1 => Ok(SelectionMetric::PassAtK(k)),
            _ => Err(Error::InvalidConfig(format!("unknown selection metric {s:?}"))),
        }
    }
}

impl Serialize for SelectionMetric {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SelectionMetric {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Samples per validation problem.
    pub samples: usize,
    pub pass_k: Vec<usize>,
    pub selection_split: Split,
    pub selection_metric: SelectionMetric,
    pub ngram: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 32,
            pass_k: vec![1, 8, 16, 32],
            selection_split: Split::ValID,
            selection_metric: SelectionMetric::PassAtK(8),
            ngram: 2,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::InvalidConfig("eval samples must be >= 1".into()));
        }
        if self.ngram == 0 {
            return Err(Error::InvalidConfig("ngram must be >= 1".into()));
        }
        if self.selection_split == Split::Train {
            return Err(Error::InvalidConfig("checkpoints are selected on a validation split".into()));
        }
        if let SelectionMetric::PassAtK(k) = self.selection_metric {
            if k > self.samples || !self.pass_k.contains(&k) {
                return Err(Error::InvalidConfig(format!(
                    "selection metric pass@{k} needs k <= samples and k listed in pass_k"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RLoopConfig {
    pub iterations: usize,
    pub rl: RLConfig,
    pub rft: RFTConfig,
    pub hardness: HardnessFilter,
    pub eval: EvalConfig,
    pub master_seed: u64,
}

impl Default for RLoopConfig {
    fn default() -> Self {
        RLoopConfig {
            iterations: 3,
            rl: RLConfig::default(),
            rft: RFTConfig::default(),
            hardness: HardnessFilter::default(),
            eval: EvalConfig::default(),
            master_seed: 0,
        }
    }
}

impl RLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        self.rl.validate()?;
        self.rft.validate()?;
        self.hardness.validate()?;
        self.eval.validate()
    }

    /// RL settings of the matched vanilla run.
    pub fn vanilla_rl(&self) -> RLConfig {
        RLConfig {
            steps: self.iterations * self.rl.steps,
            ..self.rl.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Rloop,
    Vanilla,
}

impl RunKind {
    pub fn label(self) -> &'static str {
        match self {
            RunKind::Rloop => "rloop",
            RunKind::Vanilla => "vanilla",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEval {
    pub label: String,
    pub iteration: usize,
    /// Step within the producing RL phase.
    pub step: usize,
    pub global_step: usize,
    pub hash: String,
    pub version: Version,
    pub val_id: CheckpointMetrics,
    pub val_ood: CheckpointMetrics,
}

impl CheckpointEval {
    pub fn metrics(&self, split: Split) -> Option<&CheckpointMetrics> {
        match split {
            Split::ValID => Some(&self.val_id),
            Split::ValOOD => Some(&self.val_ood),
            Split::Train => None,
        }
    }

    pub fn metric(&self, split: Split, metric: SelectionMetric) -> Option<f64> {
        let m = self.metrics(split)?;
        match metric {
            SelectionMetric::AvgAtN => Some(m.avg_at_n),
            SelectionMetric::PassAtK(k) => m.pass(k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub start_checkpoint: String,
    pub start_version: Version,
    pub rl_stats: Vec<StepStats>,
    pub cache_ref: String,
    pub cache_size: usize,
    pub expert: Option<ExpertManifest>,
    pub degenerate: bool,
    pub rft_updates: usize,
    pub rft_losses: Vec<f64>,
    pub end_checkpoint: String,
    pub end_version: Version,
    /// Validation metrics of the fine-tuned `theta_{i+1}`.
    pub end_eval: Option<CheckpointEval>,
    pub checkpoints: Vec<CheckpointEval>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub rl_steps: usize,
    pub trajectories: usize,
    pub rft_updates: usize,
    pub rft_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    /// Finished, but some iterations had no expert data.
    Degenerate { iterations: Vec<usize> },
    /// Stopped early; records up to the failure are intact.
    Halted { iteration: usize, collapse: bool, reason: String },
}

/// Parameters and datasets produced by a run, for persistence.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    /// Every distinct snapshot, in creation order.
    pub checkpoints: Vec<PolicyParams>,
    /// `(iteration, cache)`.
    pub caches: Vec<(usize, Vec<Trajectory>)>,
    pub experts: Vec<ExpertDataset>,
}

impl Artifacts {
    fn keep(&mut self, p: &PolicyParams) -> String {
        let h = p.content_hash();
        if !self.checkpoints.iter().any(|c| c.content_hash() == h) {
            self.checkpoints.push(p.clone());
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub kind: RunKind,
    pub master_seed: u64,
    pub final_params: PolicyParams,
    pub base: CheckpointEval,
    /// RL checkpoints in global-step order.
    pub checkpoints: Vec<CheckpointEval>,
    /// Rows follow `checkpoints`.
    pub val_id: SolveTable,
    pub val_ood: SolveTable,
    pub records: Vec<IterationRecord>,
    pub budget: Budget,
    pub status: RunStatus,
    pub artifacts: Artifacts,
}

impl RunOutcome {
    pub fn table(&self, split: Split) -> Option<&SolveTable> {
        match split {
            Split::ValID => Some(&self.val_id),
            Split::ValOOD => Some(&self.val_ood),
            Split::Train => None,
        }
    }

    /// Step statistics tagged with their global step.
    pub fn global_stats(&self, steps_per_iteration: usize) -> Vec<(usize, StepStats)> {
        self.records
            .iter()
            .flat_map(|r| {
                r.rl_stats.iter().map(move |s| {
                    let offset = match self.kind {
                        RunKind::Rloop => r.iteration * steps_per_iteration,
                        RunKind::Vanilla => 0,
                    };
                    (offset + s.step, s.clone())
                })
            })
            .collect()
    }

    pub fn selected(&self, split: Split, metric: SelectionMetric) -> Result<&CheckpointEval> {
        Ok(&self.checkpoints[select_checkpoint(&self.checkpoints, split, metric)?])
    }

    pub fn final_checkpoint(&self) -> Option<&CheckpointEval> {
        self.checkpoints.last()
    }
}

/// Index of the best checkpoint; ties go to the earliest.
pub fn select_checkpoint(evals: &[CheckpointEval], split: Split, metric: SelectionMetric) -> Result<usize> {
    if evals.is_empty() {
        return Err(Error::Precondition("no evaluated checkpoints".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in evals.iter().enumerate() {
        let v = e.metric(split, metric).ok_or_else(|| {
            Error::MissingArtifact(format!("checkpoint {} has no {metric} on {}", e.label, split.label()))
        })?;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    Ok(best.expect("non-empty").0)
}

/// Index of the maximum; ties go to the earliest.
pub fn argmax_earliest(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// SHA-256 of a cache's line-delimited encoding.
pub fn cache_hash(cache: &[Trajectory]) -> String {
    let mut bytes = Vec::new();
    write_cache_jsonl(cache, &mut bytes).expect("write to Vec");
    hex::encode(Sha256::digest(&bytes))
}

struct Evaluator<'a> {
    val_id: Vec<&'a Problem>,
    val_ood: Vec<&'a Problem>,
    eval: &'a EvalConfig,
    master: u64,
    max_len: usize,
}

const EVAL_RL: u64 = 0;
const EVAL_BASE: u64 = 1;
const EVAL_RFT: u64 = 2;

impl<'a> Evaluator<'a> {
    fn new(problems: &'a ProblemSet, config: &'a RLoopConfig) -> Result<Self> {
        let val_id = problems.split(Split::ValID);
        let val_ood = problems.split(Split::ValOOD);
        if val_id.is_empty() || val_ood.is_empty() {
            return Err(Error::Precondition("both validation splits must be non-empty".into()));
        }
        Ok(Evaluator {
            val_id,
            val_ood,
            eval: &config.eval,
            master: config.master_seed,
            max_len: config.rl.max_len,
        })
    }

    fn run(
        &self,
        params: &PolicyParams,
        kind: u64,
        iteration: usize,
        step: usize,
        global_step: usize,
        label: String,
    ) -> Result<(CheckpointEval, SolveSlice, SolveSlice)> {
        let seed_for = |split: u64| seed::derive_seed(self.master, &[seed::STREAM_EVAL, kind, split, global_step as u64]);
        let id = evaluate_checkpoint(params, &self.val_id, self.eval.samples, seed_for(1), self.max_len)?;
        let ood = evaluate_checkpoint(params, &self.val_ood, self.eval.samples, seed_for(2), self.max_len)?;
        let ev = CheckpointEval {
            label,
            iteration,
            step,
            global_step,
            hash: params.content_hash(),
            version: params.version,
            val_id: CheckpointMetrics::from_slice(&id, &self.eval.pass_k)?,
            val_ood: CheckpointMetrics::from_slice(&ood, &self.eval.pass_k)?,
        };
        Ok((ev, id, ood))
    }

    fn tables(&self) -> (SolveTable, SolveTable) {
        let ids = |v: &[&Problem]| v.iter().map(|p| p.id.clone()).collect();
        (
            SolveTable::new(ids(&self.val_id), self.eval.samples),
            SolveTable::new(ids(&self.val_ood), self.eval.samples),
        )
    }
}

pub fn checkpoint_label(global_step: usize) -> String {
    format!("g{global_step:05}")
}

struct Builder<'a> {
    ev: Evaluator<'a>,
    out: RunOutcome,
}

impl<'a> Builder<'a> {
    fn new(kind: RunKind, base: &PolicyParams, problems: &'a ProblemSet, config: &'a RLoopConfig) -> Result<Self> {
        config.validate()?;
        if !base.version.is_iteration_start() || base.version.iteration != 0 {
            return Err(Error::Precondition(format!(
                "base policy must be an iteration-0 start, got {:?}",
                base.version
            )));
        }
        if problems.split(Split::Train).is_empty() {
            return Err(Error::Precondition("empty training split".into()));
        }
        let ev = Evaluator::new(problems, config)?;
        let (val_id, val_ood) = ev.tables();
        let (base_eval, _, _) = ev.run(base, EVAL_BASE, 0, 0, 0, "base".into())?;
        let mut artifacts = Artifacts::default();
        artifacts.keep(base);
        Ok(Builder {
            ev,
            out: RunOutcome {
                kind,
                master_seed: config.master_seed,
                final_params: base.clone(),
                base: base_eval,
                checkpoints: Vec::new(),
                val_id,
                val_ood,
                records: Vec::new(),
                budget: Budget::default(),
                status: RunStatus::Complete,
                artifacts,
            },
        })
    }

    /// Evaluates and stores the phase's snapshots.
    fn checkpoints(&mut self, snaps: &[PolicyParams], iteration: usize, offset: usize) -> Result<Vec<CheckpointEval>> {
        let mut evals = Vec::new();
        for p in snaps {
            let step = p.version.rl_step;
            let g = offset + step;
            let (e, id, ood) = self.ev.run(p, EVAL_RL, iteration, step, g, checkpoint_label(g))?;
            self.out.val_id.push(e.label.clone(), id)?;
            self.out.val_ood.push(e.label.clone(), ood)?;
            self.out.artifacts.keep(p);
            self.out.checkpoints.push(e.clone());
            evals.push(e);
        }
        Ok(evals)
    }
}

/// Algorithm loop: `iterations` cycles of explore, filter, fine-tune
/// `theta_i`, re-initialize.
pub fn run_rloop(base: &PolicyParams, problems: &ProblemSet, config: &RLoopConfig) -> Result<RunOutcome> {
    let mut b = Builder::new(RunKind::Rloop, base, problems, config)?;
    let train = problems.split(Split::Train);
    let mut theta = base.clone();
    let mut degenerate = Vec::new();
    let shuffle_seed = seed::derive_seed(config.master_seed, &[seed::STREAM_SHUFFLE, config.rft.shuffle_seed]);
    for i in 0..config.iterations {
        debug_assert!(theta.version.is_iteration_start());
        let start_version = theta.version;
        let start_hash = b.out.artifacts.keep(&theta);
        let phase = match run_rl_phase(&theta, &train, &config.rl, config.master_seed, i) {
            Ok(p) => p,
            Err(f) => {
                let p = *f.partial;
                b.out.budget.rl_steps += p.stats.len();
                b.out.budget.trajectories += p.cache.len();
                let evals = b.checkpoints(&p.checkpoints, i, i * config.rl.steps)?;
                b.out.records.push(IterationRecord {
                    iteration: i,
                    start_checkpoint: start_hash.clone(),
                    start_version,
                    rl_stats: p.stats,
                    cache_ref: cache_hash(&p.cache),
                    cache_size: p.cache.len(),
                    expert: None,
                    degenerate: false,
                    rft_updates: 0,
                    rft_losses: Vec::new(),
                    end_checkpoint: start_hash,
                    end_version: start_version,
                    end_eval: None,
                    checkpoints: evals,
                });
                b.out.artifacts.caches.push((i, p.cache));
                b.out.status = RunStatus::Halted {
                    iteration: i,
                    collapse: matches!(f.error, Error::TrainingCollapse { .. }),
                    reason: f.error.to_string(),
                };
                b.out.final_params = theta;
                return Ok(b.out);
            }
        };
        b.out.budget.rl_steps += phase.stats.len();
        b.out.budget.trajectories += phase.cache.len();
        let evals = b.checkpoints(&phase.checkpoints, i, i * config.rl.steps)?;
        let cache_ref = cache_hash(&phase.cache);

        let (dataset, manifest) = build_expert_dataset(&phase.cache, &config.hardness, config.rft.step_stride)?;
        let rft_cfg = RFTConfig {
            shuffle_seed,
            ..config.rft.clone()
        };
        let rft = match rft_epoch(&theta, &dataset, &rft_cfg) {
            Ok(r) => r,
            Err(e) => {
                b.out.status = RunStatus::Halted {
                    iteration: i,
                    collapse: false,
                    reason: e.to_string(),
                };
                b.out.records.push(IterationRecord {
                    iteration: i,
                    start_checkpoint: start_hash.clone(),
                    start_version,
                    rl_stats: phase.stats,
                    cache_ref,
                    cache_size: phase.cache.len(),
                    expert: Some(manifest),
                    degenerate: false,
                    rft_updates: 0,
                    rft_losses: Vec::new(),
                    end_checkpoint: start_hash,
                    end_version: start_version,
                    end_eval: None,
                    checkpoints: evals,
                });
                b.out.artifacts.caches.push((i, phase.cache));
                b.out.final_params = theta;
                return Ok(b.out);
            }
        };
        if rft.degenerate {
            degenerate.push(i);
        }
        b.out.budget.rft_updates += rft.updates;
        b.out.budget.rft_examples += dataset.len() * config.rft.epochs;
        let next = rft.params;
        let end_hash = b.out.artifacts.keep(&next);
        let g = (i + 1) * config.rl.steps;
        let (end_eval, _, _) = b.ev.run(&next, EVAL_RFT, i + 1, 0, g, format!("theta{}", i + 1))?;
        b.out.records.push(IterationRecord {
            iteration: i,
            start_checkpoint: start_hash,
            start_version,
            rl_stats: phase.stats,
            cache_ref,
            cache_size: phase.cache.len(),
            expert: Some(manifest),
            degenerate: rft.degenerate,
            rft_updates: rft.updates,
            rft_losses: rft.losses,
            end_checkpoint: end_hash,
            end_version: next.version,
            end_eval: Some(end_eval),
            checkpoints: evals,
        });
        b.out.artifacts.caches.push((i, phase.cache));
        b.out.artifacts.experts.push(dataset);
        theta = next;
    }
    b.out.final_params = theta;
    if !degenerate.is_empty() {
        b.out.status = RunStatus::Degenerate { iterations: degenerate };
    }
    Ok(b.out)
}

/// One uninterrupted RL phase of `iterations * rl.steps` steps with the
/// same cadence and evaluation as the paired loop.
pub fn run_vanilla(base: &PolicyParams, problems: &ProblemSet, config: &RLoopConfig) -> Result<RunOutcome> {
    let mut b = Builder::new(RunKind::Vanilla, base, problems, config)?;
    let train = problems.split(Split::Train);
    let rl = config.vanilla_rl();
    let start_hash = b.out.artifacts.keep(base);
    let (phase, failure) = match run_rl_phase(base, &train, &rl, config.master_seed, 0) {
        Ok(p) => (p, None),
        Err(f) => (*f.partial, Some(f.error)),
    };
    b.out.budget.rl_steps = phase.stats.len();
    b.out.budget.trajectories = phase.cache.len();
    let evals = b.checkpoints(&phase.checkpoints, 0, 0)?;
    let end_hash = b.out.artifacts.keep(&phase.final_params);
    b.out.records.push(IterationRecord {
        iteration: 0,
        start_checkpoint: start_hash,
        start_version: base.version,
        rl_stats: phase.stats,
        cache_ref: cache_hash(&phase.cache),
        cache_size: phase.cache.len(),
        expert: None,
        degenerate: false,
        rft_updates: 0,
        rft_losses: Vec::new(),
        end_checkpoint: end_hash,
        end_version: phase.final_params.version,
        end_eval: None,
        checkpoints: evals,
    });
    b.out.artifacts.caches.push((0, phase.cache));
    b.out.final_params = phase.final_params;
    if let Some(e) = failure {
        b.out.status = RunStatus::Halted {
            iteration: 0,
            collapse: matches!(e, Error::TrainingCollapse { .. }),
            reason: e.to_string(),
        };
    }
    Ok(b.out)
}
