//! Browser bindings: pass@k estimates, n-gram prompt similarity and a small
//! paired loop/vanilla run on modular arithmetic chains.

use std::collections::BTreeMap;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use rloop_core::analysis::{differential_forgetting, forgetting_matrix, inter_window_mean, jaccard_ngram};
use rloop_core::experiment::{run_experiment, ExperimentConfig};
use rloop_core::orchestrator::{RunOutcome, SelectionMetric};
use rloop_core::taskgen::{SplitCounts, Token};

pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64, String> {
    rloop_core::analysis::pass_at_k(n, c, k).map_err(|e| e.to_string())
}

/// `pass@k` for every `k` in `1..=n`.
pub fn pass_curve(n: usize, c: usize) -> Result<Vec<f64>, String> {
    (1..=n).map(|k| pass_at_k(n, c, k)).collect()
}

/// Whitespace-separated words become tokens; equal words share an id.
fn tokenize<'a>(a: &'a str, b: &'a str) -> (Vec<Token>, Vec<Token>) {
    let mut ids: BTreeMap<&'a str, Token> = BTreeMap::new();
    let mut encode = |text: &'a str| -> Vec<Token> {
        text.split_whitespace()
            .map(|w| {
                let next = ids.len() as Token;
                *ids.entry(w).or_insert(next)
            })
            .collect()
    };
    (encode(a), encode(b))
}

pub fn ngram_similarity(a: &str, b: &str, n: usize) -> Result<f64, String> {
    if n == 0 {
        return Err("n must be at least 1".into());
    }
    let (ta, tb) = tokenize(a, b);
    Ok(jaccard_ngram(&ta, &tb, n))
}

#[derive(Debug, Clone, Serialize)]
pub struct Point {
    pub label: String,
    pub iteration: usize,
    pub global_step: usize,
    pub pass: Option<f64>,
    pub avg: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Arm {
    pub status: serde_json::Value,
    pub selected: Option<String>,
    pub checkpoints: Vec<Point>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub seed: u64,
    pub k: usize,
    pub base_pass: Option<f64>,
    pub base_avg: f64,
    pub rloop: Arm,
    pub vanilla: Arm,
    /// Mean of `F_vanilla - F_rloop` on ValOOD over checkpoint pairs from
    /// different loop iterations.
    pub diff_forgetting: f64,
}

/// Reduced reference configuration sized for a browser tab.
pub fn demo_config(seed: u64, iterations: usize, steps: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::reference_desk().with_seed(seed);
    cfg.problems = SplitCounts { train: 120, val_id: 60, val_ood: 60 };
    cfg.rloop.iterations = iterations;
    cfg.rloop.rl.steps = steps;
    cfg.rloop.rl.checkpoint_every = (steps / 4).max(1);
    cfg.rloop.eval.samples = 8;
    cfg.rloop.eval.pass_k = vec![1, 8];
    cfg.rloop.eval.selection_metric = SelectionMetric::PassAtK(8);
    cfg.report.report_k = 8;
    cfg.paired_vanilla = true;
    cfg
}

fn arm(run: &RunOutcome, cfg: &ExperimentConfig) -> Arm {
    let k = cfg.report.report_k;
    Arm {
        status: serde_json::to_value(&run.status).unwrap_or(serde_json::Value::Null),
        selected: run
            .selected(cfg.rloop.eval.selection_split, cfg.rloop.eval.selection_metric)
            .ok()
            .map(|e| e.label.clone()),
        checkpoints: run
            .checkpoints
            .iter()
            .map(|e| Point {
                label: e.label.clone(),
                iteration: e.iteration,
                global_step: e.global_step,
                pass: e.val_ood.pass(k),
                avg: e.val_ood.avg_at_n,
            })
            .collect(),
    }
}

pub fn compare(seed: u64, iterations: usize, steps: usize) -> Result<Comparison, String> {
    if iterations == 0 || iterations > 6 || !(2..=60).contains(&steps) {
        return Err("iterations must be in 1..=6 and steps in 2..=60".into());
    }
    let cfg = demo_config(seed, iterations, steps);
    let out = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let vanilla = out.vanilla.as_ref().ok_or("vanilla arm missing")?;
    let fv = forgetting_matrix(&vanilla.val_ood).map_err(|e| e.to_string())?;
    let fr = forgetting_matrix(&out.rloop.val_ood).map_err(|e| e.to_string())?;
    let d = differential_forgetting(&fv, &fr).map_err(|e| e.to_string())?;
    let windows: Vec<usize> = out.rloop.checkpoints.iter().map(|e| e.iteration).collect();
    let diff = if iterations > 1 {
        inter_window_mean(&d, &windows).map_err(|e| e.to_string())?
    } else {
        0.0
    };
    Ok(Comparison {
        seed,
        k: cfg.report.report_k,
        base_pass: out.rloop.base.val_ood.pass(cfg.report.report_k),
        base_avg: out.rloop.base.val_ood.avg_at_n,
        rloop: arm(&out.rloop, &cfg),
        vanilla: arm(vanilla, &cfg),
        diff_forgetting: diff,
    })
}

#[wasm_bindgen(js_name = passAtK)]
pub fn pass_at_k_js(n: usize, c: usize, k: usize) -> Result<f64, JsError> {
    pass_at_k(n, c, k).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = passCurve)]
pub fn pass_curve_js(n: usize, c: usize) -> Result<Vec<f64>, JsError> {
    pass_curve(n, c).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = ngramSimilarity)]
pub fn ngram_similarity_js(a: &str, b: &str, n: usize) -> Result<f64, JsError> {
    ngram_similarity(a, b, n).map_err(|e| JsError::new(&e))
}

/// Runs both arms and returns the comparison as JSON.
#[wasm_bindgen(js_name = compareRuns)]
pub fn compare_js(seed: u32, iterations: usize, steps: usize) -> Result<String, JsError> {
    let c = compare(seed as u64, iterations, steps).map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&c).map_err(|e| JsError::new(&e.to_string()))
}
