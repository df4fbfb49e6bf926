//! Subcommand bodies, callable without the binary.

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::Serialize;

use rloop_core::analysis::{learning_matrix, similarity_matrix, forgetting_matrix, write_curves_csv, CurvePoint};
use rloop_core::experiment::{run_experiment_on, ExperimentConfig};
use rloop_core::orchestrator::{RunKind, RunOutcome, RunStatus};
use rloop_core::store::{checkpoint_metrics_csv, persist_run, RunManifest, RunMeta, StoredRun, MANIFEST};
use rloop_core::taskgen::{render_chain, ProblemSet, Split, SplitCounts};
use rloop_core::Error;

use crate::compare::{differential, DirectionalSummary, SeedComparison};
use crate::config::{canonical_json, config_hash};
use crate::{CliError, EXIT_COLLAPSE, EXIT_DEGENERATE, EXIT_OK};

pub const PROBLEMS_FILE: &str = "problems.jsonl";

pub fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

pub fn run_id(kind: RunKind, config_hash: &str, seed: u64) -> String {
    format!("{}-{}-s{seed}", kind.label(), short(config_hash))
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub path: PathBuf,
    pub counts: SplitCounts,
    pub config_hash: String,
}

/// Writes the problem set and the config that produced it.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<Generated, CliError> {
    cfg.validate()?;
    let set = cfg.generate()?;
    fs::create_dir_all(out)?;
    let path = out.join(PROBLEMS_FILE);
    fs::write(&path, set.to_jsonl_string())?;
    fs::write(out.join("problems.config.json"), canonical_json(cfg))?;
    let count = |s| set.split(s).len();
    Ok(Generated {
        path,
        counts: SplitCounts {
            train: count(Split::Train),
            val_id: count(Split::ValID),
            val_ood: count(Split::ValOOD),
        },
        config_hash: config_hash(cfg),
    })
}

/// Reads a problem file and checks it against the config's task.
pub fn read_problems(cfg: &ExperimentConfig, path: &Path) -> Result<ProblemSet, CliError> {
    let spec = cfg.task_spec();
    let file = fs::File::open(path).map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
    let set = ProblemSet::read_jsonl(spec.clone(), BufReader::new(file))?;
    for p in &set.problems {
        let prompt_ok = render_chain(&spec.vocab, &p.chain, spec.modulus) == p.prompt_tokens;
        if !prompt_ok || p.chain.evaluate(spec.modulus) != p.target {
            return Err(CliError::Config(format!(
                "problem {} in {} does not match the configured task",
                p.id,
                path.display()
            )));
        }
    }
    Ok(set)
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config_hash: String,
    pub runs: Vec<RunRecord>,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        let statuses = self.runs.iter().map(|r| &r.manifest.status);
        let mut code = EXIT_OK;
        for s in statuses {
            match s {
                RunStatus::Halted { .. } => return EXIT_COLLAPSE,
                RunStatus::Degenerate { .. } => code = EXIT_DEGENERATE,
                RunStatus::Complete => {}
            }
        }
        code
    }
}

/// Runs the loop and, when configured, its matched vanilla run; writes one
/// run directory per arm under `out`.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, problems: Option<&Path>) -> Result<RunReport, CliError> {
    cfg.validate()?;
    let hash = config_hash(cfg);
    let json = canonical_json(cfg);
    let set = match problems {
        Some(p) => read_problems(cfg, p)?,
        None => cfg.generate()?,
    };
    let paired = run_experiment_on(cfg, set)?;
    let seed = cfg.master_seed();
    let rloop_id = run_id(RunKind::Rloop, &hash, seed);
    let vanilla_id = paired.vanilla.as_ref().map(|_| run_id(RunKind::Vanilla, &hash, seed));
    let meta = |run_id: &str, other: Option<String>| RunMeta {
        run_id: run_id.to_string(),
        config_hash: hash.clone(),
        config_json: &json,
        paired_with: other,
        steps_per_iteration: cfg.rloop.rl.steps,
        selection_split: cfg.rloop.eval.selection_split,
        selection_metric: cfg.rloop.eval.selection_metric,
    };
    let mut arms: Vec<(String, Option<String>, &RunOutcome)> = vec![(rloop_id.clone(), vanilla_id.clone(), &paired.rloop)];
    if let (Some(v), Some(id)) = (&paired.vanilla, &vanilla_id) {
        arms.push((id.clone(), Some(rloop_id.clone()), v));
    }
    let mut runs = Vec::new();
    for (id, other, outcome) in arms {
        let dir = out.join(&id);
        let manifest = persist_run(&dir, &meta(&id, other), outcome, &paired.problems)?;
        runs.push(RunRecord { dir, manifest });
    }
    Ok(RunReport { config_hash: hash, runs })
}

/// Loads run directories; a directory without a manifest is searched one
/// level down.
pub fn collect_runs(paths: &[PathBuf]) -> Result<Vec<StoredRun>, CliError> {
    let mut dirs = Vec::new();
    for p in paths {
        if p.join(MANIFEST).exists() {
            dirs.push(p.clone());
        } else if p.is_dir() {
            let mut subs: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|d| d.join(MANIFEST).exists())
                .collect();
            subs.sort();
            dirs.extend(subs);
        } else {
            return Err(CliError::Core(Error::MissingArtifact(format!("{}", p.join(MANIFEST).display()))));
        }
    }
    if dirs.is_empty() {
        return Err(CliError::Core(Error::MissingArtifact("no run directories found".into())));
    }
    let mut runs = Vec::new();
    let mut missing = Vec::new();
    for d in dirs {
        match StoredRun::load(&d) {
            Ok(r) => runs.push(r),
            Err(Error::MissingArtifact(m)) => missing.push(m),
            Err(e) => return Err(e.into()),
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Core(Error::MissingArtifact(missing.join("; "))));
    }
    Ok(runs)
}

pub fn run_config(run: &StoredRun) -> Result<ExperimentConfig, CliError> {
    let bytes = fs::read(run.dir.join("config.json"))?;
    Ok(serde_json::from_slice(&bytes).map_err(Error::from)?)
}

/// `(vanilla, loop)` index pairs linked through their manifests, by seed.
pub fn pairs(runs: &[StoredRun]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = runs
        .iter()
        .enumerate()
        .filter(|(_, r)| r.summary.kind == RunKind::Rloop)
        .filter_map(|(ri, r)| {
            let other = r.manifest.paired_with.as_ref()?;
            let vi = runs.iter().position(|v| &v.manifest.run_id == other && v.summary.kind == RunKind::Vanilla)?;
            Some((vi, ri))
        })
        .collect();
    out.sort_by_key(|&(_, ri)| (runs[ri].summary.master_seed, runs[ri].manifest.run_id.clone()));
    out
}

pub fn comparisons(runs: &[StoredRun]) -> Result<Vec<SeedComparison>, CliError> {
    pairs(runs)
        .into_iter()
        .map(|(vi, ri)| {
            let k = run_config(&runs[ri])?.report.report_k;
            SeedComparison::new(&runs[vi], &runs[ri], k)
        })
        .collect()
}

fn tag(run: &StoredRun) -> String {
    format!(
        "# run={} config_hash={} seed={}\n",
        run.manifest.run_id, run.manifest.config_hash, run.manifest.master_seed
    )
}

fn write_tagged(path: &Path, header: &str, body: &str) -> Result<(), CliError> {
    fs::write(path, format!("{header}{body}"))?;
    Ok(())
}

fn json_pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn curves(run: &StoredRun) -> Vec<CurvePoint> {
    let id = &run.manifest.run_id;
    let pt = |series: String, step: usize, value: f64| CurvePoint { run_id: id.clone(), series, step, value };
    let mut out = Vec::new();
    for (g, s) in run.global_stats() {
        out.push(pt("train_reward".into(), g, s.mean_train_reward));
        out.push(pt("entropy".into(), g, s.mean_token_entropy));
        out.push(pt("grad_norm".into(), g, s.grad_norm));
        out.push(pt("zero_advantage_fraction".into(), g, s.fraction_zero_advantage_groups));
    }
    let evals = std::iter::once(&run.summary.base).chain(&run.summary.checkpoints);
    for e in evals {
        for split in [Split::ValID, Split::ValOOD] {
            let m = e.metrics(split).expect("validation split");
            out.push(pt(format!("{}_avg", split.label()), e.global_step, m.avg_at_n));
            for &(k, v) in &m.pass_at {
                out.push(pt(format!("{}_pass@{k}", split.label()), e.global_step, v));
            }
        }
    }
    out
}

fn aligned_csv(vanilla: &StoredRun, rloop: &StoredRun, k: usize) -> String {
    let mut s = format!(
        "global_step,vanilla_val_ood_pass@{k},rloop_val_ood_pass@{k},vanilla_val_ood_avg,rloop_val_ood_avg,vanilla_val_id_pass@{k},rloop_val_id_pass@{k}\n"
    );
    let f = |x: Option<f64>| x.map_or_else(String::new, |v| v.to_string());
    for (v, r) in vanilla.summary.checkpoints.iter().zip(&rloop.summary.checkpoints) {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            v.global_step,
            f(v.val_ood.pass(k)),
            f(r.val_ood.pass(k)),
            v.val_ood.avg_at_n,
            r.val_ood.avg_at_n,
            f(v.val_id.pass(k)),
            f(r.val_id.pass(k))
        );
    }
    s
}

/// Writes matrices, metric tables and curves per run, and comparisons per
/// pair, under `out`. Run directories are only read.
pub fn cmd_analyze(paths: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let runs = collect_runs(paths)?;
    let mut written = Vec::new();
    for run in &runs {
        if out.starts_with(&run.dir) {
            return Err(CliError::Config(format!("analysis output {} is inside run {}", out.display(), run.dir.display())));
        }
    }
    for run in &runs {
        let cfg = run_config(run)?;
        let dir = out.join(&run.manifest.run_id);
        fs::create_dir_all(&dir)?;
        let h = tag(run);
        for split in [Split::ValID, Split::ValOOD] {
            let t = run.table(split).expect("validation split");
            let l = split.label();
            write_tagged(&dir.join(format!("learning_{l}.csv")), &h, &learning_matrix(t)?.to_csv_string())?;
            write_tagged(&dir.join(format!("forgetting_{l}.csv")), &h, &forgetting_matrix(t)?.to_csv_string())?;
            write_tagged(
                &dir.join(format!("similarity_{l}.csv")),
                &h,
                &similarity_matrix(t, cfg.rloop.eval.ngram)?.to_csv_string(),
            )?;
        }
        let mut evals = vec![run.summary.base.clone()];
        evals.extend(run.summary.checkpoints.iter().cloned());
        evals.extend(run.summary.iteration_ends.iter().cloned());
        write_tagged(&dir.join("metrics.csv"), &h, &checkpoint_metrics_csv(&evals))?;
        let mut buf = Vec::new();
        write_curves_csv(&curves(run), &mut buf)?;
        write_tagged(&dir.join("curves.csv"), &h, &String::from_utf8(buf).expect("utf8"))?;
        written.push(dir);
    }
    let mut seeds = Vec::new();
    for (vi, ri) in pairs(&runs) {
        let (v, r) = (&runs[vi], &runs[ri]);
        let k = run_config(r)?.report.report_k;
        let dir = out.join(format!("pair-{}", r.manifest.run_id));
        fs::create_dir_all(&dir)?;
        let h = format!(
            "# runs={},{} config_hash={} seed={}\n",
            v.manifest.run_id, r.manifest.run_id, r.manifest.config_hash, r.manifest.master_seed
        );
        for split in [Split::ValID, Split::ValOOD] {
            let d = differential(v, r, split)?;
            write_tagged(&dir.join(format!("differential_forgetting_{}.csv", split.label())), &h, &d.to_csv_string())?;
        }
        write_tagged(&dir.join("aligned.csv"), &h, &aligned_csv(v, r, k))?;
        let cmp = SeedComparison::new(v, r, k)?;
        fs::write(dir.join("comparison.json"), json_pretty(&cmp))?;
        seeds.push(cmp);
        written.push(dir);
    }
    if !seeds.is_empty() {
        let path = out.join("summary.json");
        fs::write(&path, json_pretty(&DirectionalSummary::new(seeds)))?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone)]
pub struct Report {
    pub text: String,
    pub summary: Option<DirectionalSummary>,
}

fn metric_cell(m: Option<f64>) -> String {
    m.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

/// Human-readable run and comparison tables.
pub fn cmd_report(paths: &[PathBuf]) -> Result<Report, CliError> {
    let runs = collect_runs(paths)?;
    let mut t = String::new();
    for run in &runs {
        let s = &run.summary;
        let k = run_config(run)?.report.report_k;
        let _ = writeln!(t, "{}  (config {}, seed {})", s.run_id, short(&s.config_hash), s.master_seed);
        let _ = writeln!(t, "  status: {}", serde_json::to_string(&s.status).map_err(Error::from)?);
        let _ = writeln!(
            t,
            "  budget: {} RL steps, {} trajectories, {} RFT updates on {} examples",
            s.budget.rl_steps, s.budget.trajectories, s.budget.rft_updates, s.budget.rft_examples
        );
        let _ = writeln!(t, "  {:<10} {:>8} {:>10} {:>10} {:>10}", "ValOOD", "step", format!("pass@{k}"), "avg@N", "ValID p@k");
        let mut row = |name: &str, e: &rloop_core::orchestrator::CheckpointEval| {
            let _ = writeln!(
                t,
                "  {:<10} {:>8} {:>10} {:>10.3} {:>10}",
                name,
                e.global_step,
                metric_cell(e.val_ood.pass(k)),
                e.val_ood.avg_at_n,
                metric_cell(e.val_id.pass(k))
            );
        };
        row("base", &s.base);
        if let Some(e) = s.checkpoints.iter().find(|e| Some(&e.label) == s.selected.as_ref()) {
            row("selected", e);
        }
        if let Some(e) = s.checkpoints.last() {
            row("last RL", e);
        }
        for e in &s.iteration_ends {
            row(&e.label, e);
        }
        t.push('\n');
    }
    let seeds = comparisons(&runs)?;
    let summary = if seeds.is_empty() {
        None
    } else {
        let d = DirectionalSummary::new(seeds);
        let k = d.seeds[0].k;
        let _ = writeln!(
            t,
            "{:>6} {:>12} {:>12} {:>10} {:>10} {:>10} {:>10}",
            "seed",
            format!("v pass@{k}"),
            format!("r pass@{k}"),
            "v avg",
            "r avg",
            "v peak@",
            "diffF"
        );
        for s in &d.seeds {
            let _ = writeln!(
                t,
                "{:>6} {:>12.3} {:>12.3} {:>10.3} {:>10.3} {:>10} {:>10.4}",
                s.seed,
                s.vanilla_selected_pass,
                s.rloop_selected_pass,
                s.vanilla_selected_avg,
                s.rloop_selected_avg,
                s.vanilla_peak_step,
                s.inter_iteration_diff_forgetting
            );
        }
        let _ = writeln!(
            t,
            "median selected ValOOD: loop pass@{k} {:.3} vs vanilla {:.3}; loop avg@N {:.3} vs vanilla {:.3}; strict pass wins {}/{}",
            d.median_rloop_pass,
            d.median_vanilla_pass,
            d.median_rloop_avg,
            d.median_vanilla_avg,
            d.strict_pass_wins,
            d.seeds.len()
        );
        let _ = writeln!(
            t,
            "vanilla: train reward {:.3} at end vs {:.3} at ValOOD peak; ValOOD pass@{k} {:.3} at end vs {:.3} at peak",
            d.median_train_reward_at_final, d.median_train_reward_at_peak, d.median_vanilla_final_pass, d.median_vanilla_peak_pass
        );
        let _ = writeln!(t, "median inter-iteration differential forgetting: {:.4}", d.median_diff_forgetting);
        Some(d)
    };
    Ok(Report { text: t, summary })
}
