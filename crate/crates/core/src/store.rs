//! Run store: one directory per run, every file written once.
//!
//! ```text
//! <run>/config.json          canonical experiment config
//! <run>/problems.jsonl       the problem set the run trained and evaluated on
//! <run>/records/iter_000.json
//! <run>/checkpoints/<sha256>.rlpc
//! <run>/caches/<sha256>.jsonl
//! <run>/experts/<sha256>.jsonl
//! <run>/tables/{val_id,val_ood}.json
//! <run>/metrics/{rl_stats,checkpoints}.csv
//! <run>/outcome.json
//! <run>/manifest.json        artifact path -> SHA-256, written last
//! ```
//!
//! Checkpoints and caches are named by the hash of their bytes, so the
//! references inside records resolve to files directly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::SolveTable;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::orchestrator::{cache_hash, Budget, CheckpointEval, IterationRecord, RunKind, RunOutcome, RunStatus, SelectionMetric};
use crate::policy::{ContextSpec, PolicyParams};
use crate::rl::{write_cache_jsonl, StepStats};
use crate::taskgen::{ProblemSet, Split};

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write-once artifact directory.
#[derive(Debug)]
pub struct RunStore {
    root: PathBuf,
    artifacts: BTreeMap<String, String>,
}

impl RunStore {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(RunStore { root, artifacts: BTreeMap::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `bytes` at `rel`. An existing file must already hold the
    /// same bytes.
    pub fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<String> {
        if rel == MANIFEST {
            return Err(Error::Precondition("the manifest is written by finish()".into()));
        }
        let hash = sha256_hex(bytes);
        let path = self.root.join(rel);
        if path.exists() {
            if sha256_hex(&fs::read(&path)?) != hash {
                return Err(Error::ImmutableArtifact(path.display().to_string()));
            }
        } else {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            let tmp = path.with_extension("partial");
            fs::File::create(&tmp)?.write_all(bytes)?;
            fs::rename(&tmp, &path)?;
        }
        self.artifacts.insert(rel.to_string(), hash.clone());
        Ok(hash)
    }

    pub fn put_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<String> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.put(rel, &bytes)
    }

    pub fn artifacts(&self) -> &BTreeMap<String, String> {
        &self.artifacts
    }

    pub fn finish(self, mut manifest: RunManifest) -> Result<RunManifest> {
        manifest.artifacts = self.artifacts;
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        let path = self.root.join(MANIFEST);
        if path.exists() && fs::read(&path)? != bytes {
            return Err(Error::ImmutableArtifact(path.display().to_string()));
        }
        fs::write(path, bytes)?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub kind: RunKind,
    pub config_hash: String,
    pub master_seed: u64,
    /// Run id of the other arm of a paired comparison.
    pub paired_with: Option<String>,
    pub status: RunStatus,
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Paths whose file is missing or whose bytes no longer match.
    pub fn check(&self, dir: &Path) -> Vec<String> {
        self.artifacts
            .iter()
            .filter(|(rel, hash)| match fs::read(dir.join(rel)) {
                Ok(b) => &sha256_hex(&b) != *hash,
                Err(_) => true,
            })
            .map(|(rel, _)| rel.clone())
            .collect()
    }
}

/// Run-level summary stored next to the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub kind: RunKind,
    pub config_hash: String,
    pub master_seed: u64,
    pub status: RunStatus,
    pub budget: Budget,
    pub steps_per_iteration: usize,
    pub selection_split: Split,
    pub selection_metric: SelectionMetric,
    pub base: CheckpointEval,
    pub checkpoints: Vec<CheckpointEval>,
    /// Best RL checkpoint on `selection_split` under `selection_metric`.
    pub selected: Option<String>,
    /// Last RL checkpoint.
    pub final_checkpoint: Option<String>,
    pub final_params: String,
    /// Fine-tuned `theta_{i+1}` evaluations, loop runs only.
    pub iteration_ends: Vec<CheckpointEval>,
}

/// Identity of a run inside an experiment.
#[derive(Debug, Clone)]
pub struct RunMeta<'a> {
    pub run_id: String,
    pub config_hash: String,
    pub config_json: &'a [u8],
    pub paired_with: Option<String>,
    pub steps_per_iteration: usize,
    pub selection_split: Split,
    pub selection_metric: SelectionMetric,
}

pub fn stats_csv(rows: &[(usize, StepStats)]) -> String {
    let mut s = String::from("global_step,iteration,step,mean_train_reward,mean_token_entropy,grad_norm,fraction_zero_advantage_groups,collapse_flag\n");
    for (g, st) in rows {
        s.push_str(&format!(
            "{g},{},{},{},{},{},{},{}\n",
            st.iteration,
            st.step,
            st.mean_train_reward,
            st.mean_token_entropy,
            st.grad_norm,
            st.fraction_zero_advantage_groups,
            st.collapse_flag as u8
        ));
    }
    s
}

pub fn checkpoint_metrics_csv(evals: &[CheckpointEval]) -> String {
    let ks: Vec<usize> = evals
        .first()
        .map(|e| e.val_id.pass_at.iter().map(|&(k, _)| k).collect())
        .unwrap_or_default();
    let mut s = String::from("label,iteration,step,global_step,split,avg_at_n");
    for k in &ks {
        s.push_str(&format!(",pass_at_{k}"));
    }
    s.push('\n');
    for e in evals {
        for split in [Split::ValID, Split::ValOOD] {
            let m = e.metrics(split).expect("validation split");
            s.push_str(&format!("{},{},{},{},{},{}", e.label, e.iteration, e.step, e.global_step, split.label(), m.avg_at_n));
            for &k in &ks {
                s.push_str(&format!(",{}", m.pass(k).unwrap_or(f64::NAN)));
            }
            s.push('\n');
        }
    }
    s
}

/// Writes every artifact of `outcome` and the manifest.
pub fn persist_run(root: &Path, meta: &RunMeta, outcome: &RunOutcome, problems: &ProblemSet) -> Result<RunManifest> {
    let mut store = RunStore::create(root)?;
    store.put("config.json", meta.config_json)?;
    store.put("problems.jsonl", problems.to_jsonl_string().as_bytes())?;
    for p in &outcome.artifacts.checkpoints {
        store.put(&format!("checkpoints/{}.rlpc", p.content_hash()), &checkpoint::encode(p))?;
    }
    for (_, cache) in &outcome.artifacts.caches {
        let mut bytes = Vec::new();
        write_cache_jsonl(cache, &mut bytes)?;
        store.put(&format!("caches/{}.jsonl", cache_hash(cache)), &bytes)?;
    }
    for d in &outcome.artifacts.experts {
        let mut bytes = Vec::new();
        d.write_jsonl(&mut bytes)?;
        store.put(&format!("experts/{}.jsonl", sha256_hex(&bytes)), &bytes)?;
    }
    for r in &outcome.records {
        store.put_json(&format!("records/iter_{:03}.json", r.iteration), r)?;
    }
    store.put_json("tables/val_id.json", &outcome.val_id)?;
    store.put_json("tables/val_ood.json", &outcome.val_ood)?;
    store.put("metrics/rl_stats.csv", stats_csv(&outcome.global_stats(meta.steps_per_iteration)).as_bytes())?;
    store.put("metrics/checkpoints.csv", checkpoint_metrics_csv(&outcome.checkpoints).as_bytes())?;
    let summary = RunSummary {
        run_id: meta.run_id.clone(),
        kind: outcome.kind,
        config_hash: meta.config_hash.clone(),
        master_seed: outcome.master_seed,
        status: outcome.status.clone(),
        budget: outcome.budget.clone(),
        steps_per_iteration: meta.steps_per_iteration,
        selection_split: meta.selection_split,
        selection_metric: meta.selection_metric,
        base: outcome.base.clone(),
        checkpoints: outcome.checkpoints.clone(),
        selected: outcome.selected(meta.selection_split, meta.selection_metric).ok().map(|e| e.label.clone()),
        final_checkpoint: outcome.final_checkpoint().map(|e| e.label.clone()),
        final_params: outcome.final_params.content_hash(),
        iteration_ends: outcome.records.iter().filter_map(|r| r.end_eval.clone()).collect(),
    };
    store.put_json("outcome.json", &summary)?;
    store.finish(RunManifest {
        run_id: meta.run_id.clone(),
        kind: outcome.kind,
        config_hash: meta.config_hash.clone(),
        master_seed: outcome.master_seed,
        paired_with: meta.paired_with.clone(),
        status: outcome.status.clone(),
        artifacts: BTreeMap::new(),
    })
}

/// A persisted run read back for analysis.
#[derive(Debug, Clone)]
pub struct StoredRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub summary: RunSummary,
    pub records: Vec<IterationRecord>,
    pub val_id: SolveTable,
    pub val_ood: SolveTable,
}

fn read_json<T: for<'de> Deserialize<'de>>(dir: &Path, rel: &str) -> Result<T> {
    let path = dir.join(rel);
    let text = fs::read_to_string(&path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    Ok(serde_json::from_str(&text)?)
}

impl StoredRun {
    /// Loads a run, failing with the list of missing or altered files.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = RunManifest::read(dir)?;
        let bad = manifest.check(dir);
        if !bad.is_empty() {
            return Err(Error::MissingArtifact(format!(
                "{}: missing or altered: {}",
                dir.display(),
                bad.join(", ")
            )));
        }
        let mut rec_paths: Vec<&String> = manifest.artifacts.keys().filter(|k| k.starts_with("records/")).collect();
        rec_paths.sort();
        let records = rec_paths.iter().map(|p| read_json(dir, p)).collect::<Result<Vec<IterationRecord>>>()?;
        Ok(StoredRun {
            dir: dir.to_path_buf(),
            summary: read_json(dir, "outcome.json")?,
            val_id: read_json(dir, "tables/val_id.json")?,
            val_ood: read_json(dir, "tables/val_ood.json")?,
            records,
            manifest,
        })
    }

    pub fn table(&self, split: Split) -> Option<&SolveTable> {
        match split {
            Split::ValID => Some(&self.val_id),
            Split::ValOOD => Some(&self.val_ood),
            Split::Train => None,
        }
    }

    pub fn checkpoint(&self, hash: &str, spec: &ContextSpec) -> Result<PolicyParams> {
        let rel = format!("checkpoints/{hash}.rlpc");
        if !self.manifest.artifacts.contains_key(&rel) {
            return Err(Error::MissingArtifact(rel));
        }
        checkpoint::decode(spec, &fs::read(self.dir.join(rel))?)
    }

    /// Per-step stats on the run's global step axis.
    pub fn global_stats(&self) -> Vec<(usize, StepStats)> {
        let n = self.summary.steps_per_iteration;
        self.records
            .iter()
            .flat_map(|r| {
                let offset = match self.summary.kind {
                    RunKind::Rloop => r.iteration * n,
                    RunKind::Vanilla => 0,
                };
                r.rl_stats.iter().map(move |s| (offset + s.step, s.clone()))
            })
            .collect()
    }
}
