use std::collections::BTreeSet;

use rloop_core::experiment::{run_experiment, ExperimentConfig};
use rloop_core::orchestrator::SelectionMetric;
use rloop_core::taskgen::{LenRange, ProblemSet, Split, SplitCounts};

fn tiny(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::reference_desk().with_seed(seed);
    c.task.modulus = 3;
    c.task.chain_len_train = LenRange::new(1, 1);
    c.task.chain_len_ood = LenRange::new(2, 2);
    c.problems = SplitCounts { train: 12, val_id: 6, val_ood: 6 };
    c.warmup.examples = 60;
    c.warmup.chain_len = LenRange::new(1, 1);
    c.rloop.iterations = 2;
    c.rloop.rl.steps = 6;
    c.rloop.rl.group_size = 4;
    c.rloop.rl.problems_per_step = 4;
    c.rloop.rl.checkpoint_every = 3;
    c.rloop.rl.max_len = 10;
    c.rloop.rl.learning_rate = 20.0;
    c.rloop.eval.samples = 4;
    c.rloop.eval.pass_k = vec![1, 4];
    c.rloop.eval.selection_metric = SelectionMetric::PassAtK(4);
    c.report.report_k = 4;
    c
}

#[test]
fn splits_are_disjoint_and_lengths_follow_the_config() {
    let cfg = ExperimentConfig::reference_desk().with_seed(11);
    let set = cfg.generate().unwrap();
    assert_eq!(set.split(Split::Train).len(), 200);
    assert_eq!(set.split(Split::ValID).len(), 100);
    assert_eq!(set.split(Split::ValOOD).len(), 100);
    let chains: BTreeSet<_> = set.problems.iter().map(|p| format!("{:?}", p.chain)).collect();
    assert_eq!(chains.len(), set.problems.len());
    for p in &set.problems {
        let range = match p.split {
            Split::ValOOD => cfg.task.chain_len_ood,
            _ => cfg.task.chain_len_train,
        };
        assert!(range.contains(p.chain.len()), "{} has length {}", p.id, p.chain.len());
        assert_eq!(p.chain.evaluate(cfg.task.modulus), p.target);
        assert_eq!(p.prompt_tokens.len(), 2 * p.chain.len() + 4);
    }
}

#[test]
fn problem_files_round_trip() {
    let cfg = tiny(5);
    let set = cfg.generate().unwrap();
    let text = set.to_jsonl_string();
    let back = ProblemSet::read_jsonl(cfg.task_spec(), text.as_bytes()).unwrap();
    assert_eq!(back, set);
}

#[test]
fn paired_arms_spend_the_same_rl_budget() {
    let out = run_experiment(&tiny(2)).unwrap();
    let vanilla = out.vanilla.as_ref().unwrap();
    assert_eq!(out.rloop.budget.rl_steps, 12);
    assert_eq!(out.rloop.budget.rl_steps, vanilla.budget.rl_steps);
    assert_eq!(out.rloop.budget.trajectories, vanilla.budget.trajectories);
    assert_eq!(vanilla.budget.rft_updates, 0);
    let steps = |r: &rloop_core::orchestrator::RunOutcome| r.checkpoints.iter().map(|e| e.global_step).collect::<Vec<_>>();
    assert_eq!(steps(&out.rloop), steps(vanilla));
    assert_eq!(out.rloop.val_ood.checkpoints.len(), out.rloop.checkpoints.len());
}

#[test]
fn runs_depend_only_on_config() {
    let a = run_experiment(&tiny(4)).unwrap();
    let b = run_experiment(&tiny(4)).unwrap();
    assert_eq!(a.rloop.final_params, b.rloop.final_params);
    assert_eq!(a.rloop.checkpoints, b.rloop.checkpoints);
    let c = run_experiment(&tiny(5)).unwrap();
    assert_ne!(a.problems, c.problems);
}
