//! Experiment description: task, problem counts, policy context, warm-up and
//! loop settings in one serializable value, plus the setup that turns it
//! into a problem set and a base policy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orchestrator::{run_rloop, run_vanilla, RLoopConfig, RunOutcome, SelectionMetric};
use crate::policy::{ContextSpec, PolicyParams, DEFAULT_STATE_BUDGET};
use crate::seed;
use crate::taskgen::{generate_split_counts, LenRange, Op, ProblemSet, SplitCounts, TaskSpec, Vocabulary};
use crate::warmup::{warm_start, WarmupConfig};

/// Seed labels for setup streams derived from the master seed.
const SETUP_TASK: u64 = 1;
const SETUP_WARMUP: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub modulus: u32,
    pub chain_len_train: LenRange,
    pub chain_len_ood: LenRange,
    pub operators: Vec<Op>,
    /// Derived from the master seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            modulus: 5,
            chain_len_train: LenRange::new(1, 2),
            chain_len_ood: LenRange::new(3, 4),
            operators: Op::ALL.to_vec(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextConfig {
    pub carry_bucket: u32,
    pub operand_bucket: u32,
    pub problem_buckets: u32,
    pub position_bucket_width: usize,
    pub position_buckets: usize,
    pub state_budget: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            carry_bucket: 1,
            operand_bucket: 1,
            problem_buckets: 1,
            position_bucket_width: 16,
            position_buckets: 1,
            state_budget: DEFAULT_STATE_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    /// pass@k used in comparison tables and directional summaries.
    pub report_k: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { report_k: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub problems: SplitCounts,
    pub context: ContextConfig,
    pub warmup: WarmupConfig,
    /// Derived from the master seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_seed: Option<u64>,
    pub rloop: RLoopConfig,
    pub paired_vanilla: bool,
    pub report: ReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::reference_desk()
    }
}

impl ExperimentConfig {
    /// The reference desk configuration: three iterations of 50 RL steps
    /// on short modular chains, evaluated on longer ones.
    pub fn reference_desk() -> Self {
        let task = TaskConfig::default();
        let mut rloop = RLoopConfig::default();
        rloop.iterations = 3;
        rloop.rl.steps = 50;
        rloop.rl.group_size = 8;
        rloop.rl.problems_per_step = 16;
        rloop.rl.learning_rate = 60.0;
        rloop.rl.checkpoint_every = 10;
        rloop.rl.max_len = 24;
        rloop.rft.learning_rate = 10.0;
        rloop.rft.minibatch_size = 32;
        rloop.hardness.success_rate_threshold = 0.5;
        rloop.eval.samples = 16;
        rloop.eval.pass_k = vec![1, 8, 16];
        rloop.eval.selection_metric = SelectionMetric::PassAtK(8);
        ExperimentConfig {
            warmup: WarmupConfig {
                examples: 400,
                chain_len: task.chain_len_train,
                digit_noise: 0.8,
                epochs: 3,
                learning_rate: 1.0,
                minibatch_size: 16,
                init_noise: 0.0,
            },
            task,
            problems: SplitCounts { train: 200, val_id: 100, val_ood: 100 },
            context: ContextConfig::default(),
            warmup_seed: None,
            rloop,
            paired_vanilla: true,
            report: ReportConfig::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rloop.master_seed = seed;
        self
    }

    pub fn master_seed(&self) -> u64 {
        self.rloop.master_seed
    }

    pub fn task_seed(&self) -> u64 {
        self.task
            .seed
            .unwrap_or_else(|| seed::derive_seed(self.master_seed(), &[seed::STREAM_TASK, SETUP_TASK]))
    }

    pub fn warmup_seed(&self) -> u64 {
        self.warmup_seed
            .unwrap_or_else(|| seed::derive_seed(self.master_seed(), &[seed::STREAM_WARMUP, SETUP_WARMUP]))
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            modulus: self.task.modulus,
            chain_len_train: self.task.chain_len_train,
            chain_len_ood: self.task.chain_len_ood,
            operator_set: self.task.operators.clone(),
            vocab: Vocabulary::standard(self.task.modulus),
            seed: self.task_seed(),
        }
    }

    pub fn context_spec(&self) -> ContextSpec {
        let c = &self.context;
        ContextSpec {
            modulus: self.task.modulus,
            vocab: Vocabulary::standard(self.task.modulus),
            carry_bucket: c.carry_bucket,
            operand_bucket: c.operand_bucket,
            problem_buckets: c.problem_buckets,
            position_bucket_width: c.position_bucket_width,
            position_buckets: c.position_buckets,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task_spec().validate()?;
        self.context_spec().validate()?;
        self.warmup.validate()?;
        self.rloop.validate()?;
        if !self.rloop.eval.pass_k.contains(&self.report.report_k) {
            return Err(Error::InvalidConfig(format!(
                "report_k {} must be listed in eval.pass_k",
                self.report.report_k
            )));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<ProblemSet> {
        generate_split_counts(&self.task_spec(), self.problems)
    }

    /// `theta_0` for this experiment.
    pub fn base_policy(&self) -> Result<PolicyParams> {
        let task = self.task_spec();
        warm_start(&self.context_spec(), &task, &self.warmup, self.warmup_seed(), self.context.state_budget)
    }
}

/// Both arms of a paired comparison from one base policy.
#[derive(Debug, Clone)]
pub struct PairedOutcome {
    pub problems: ProblemSet,
    pub base: PolicyParams,
    pub rloop: RunOutcome,
    pub vanilla: Option<RunOutcome>,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<PairedOutcome> {
    config.validate()?;
    let problems = config.generate()?;
    run_experiment_on(config, problems)
}

/// As [`run_experiment`], on an already generated problem set.
pub fn run_experiment_on(config: &ExperimentConfig, problems: ProblemSet) -> Result<PairedOutcome> {
    config.validate()?;
    let base = config.base_policy()?;
    let rloop = run_rloop(&base, &problems, &config.rloop)?;
    let vanilla = if config.paired_vanilla {
        Some(run_vanilla(&base, &problems, &config.rloop)?)
    } else {
        None
    };
    Ok(PairedOutcome { problems, base, rloop, vanilla })
}
