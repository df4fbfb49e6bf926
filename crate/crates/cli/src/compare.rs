//! Paired vanilla/loop comparisons and their summaries across seeds.

use serde::{Deserialize, Serialize};

use rloop_core::analysis::{differential_forgetting, forgetting_matrix, inter_window_mean, Matrix};
use rloop_core::orchestrator::{argmax_earliest, CheckpointEval};
use rloop_core::store::StoredRun;
use rloop_core::taskgen::Split;
use rloop_core::Error;

use crate::CliError;

/// One seed's vanilla and loop runs side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub config_hash: String,
    pub k: usize,
    /// Vanilla checkpoint with the highest ValOOD pass@k.
    pub vanilla_peak_step: usize,
    pub vanilla_peak_pass: f64,
    pub vanilla_final_step: usize,
    pub vanilla_final_pass: f64,
    pub train_reward_at_peak: f64,
    pub train_reward_at_final: f64,
    pub vanilla_selected: String,
    pub vanilla_selected_pass: f64,
    pub vanilla_selected_avg: f64,
    pub rloop_selected: String,
    pub rloop_selected_pass: f64,
    pub rloop_selected_avg: f64,
    /// ValOOD metrics of the loop's returned policy `theta_I`.
    pub rloop_final_pass: Option<f64>,
    pub rloop_final_avg: Option<f64>,
    /// Mean of `F_vanilla - F_rloop` over checkpoint pairs in different
    /// loop iterations, ValOOD.
    pub inter_iteration_diff_forgetting: f64,
}

fn ood_pass(e: &CheckpointEval, k: usize) -> Result<f64, CliError> {
    e.val_ood
        .pass(k)
        .ok_or_else(|| CliError::Core(Error::MissingArtifact(format!("pass@{k} for {}", e.label))))
}

fn find<'a>(run: &'a StoredRun, label: &Option<String>) -> Result<&'a CheckpointEval, CliError> {
    let label = label
        .as_ref()
        .ok_or(CliError::Core(Error::NoCheckpoints))?;
    run.summary
        .checkpoints
        .iter()
        .find(|e| &e.label == label)
        .ok_or_else(|| CliError::Core(Error::MissingArtifact(format!("checkpoint {label}"))))
}

/// `F_vanilla - F_rloop` on `split`; checkpoints must share global steps.
pub fn differential(vanilla: &StoredRun, rloop: &StoredRun, split: Split) -> Result<Matrix, CliError> {
    let gv: Vec<usize> = vanilla.summary.checkpoints.iter().map(|e| e.global_step).collect();
    let gr: Vec<usize> = rloop.summary.checkpoints.iter().map(|e| e.global_step).collect();
    if gv != gr {
        return Err(CliError::Core(Error::ShapeMismatch(format!(
            "checkpoint steps differ: vanilla {gv:?}, loop {gr:?}"
        ))));
    }
    let fv = forgetting_matrix(vanilla.table(split).expect("validation split"))?;
    let fr = forgetting_matrix(rloop.table(split).expect("validation split"))?;
    Ok(differential_forgetting(&fv, &fr)?)
}

impl SeedComparison {
    pub fn new(vanilla: &StoredRun, rloop: &StoredRun, k: usize) -> Result<Self, CliError> {
        let vs = &vanilla.summary;
        let passes = vs.checkpoints.iter().map(|e| ood_pass(e, k)).collect::<Result<Vec<_>, _>>()?;
        let peak = argmax_earliest(&passes).ok_or(CliError::Core(Error::NoCheckpoints))?;
        let last = vs.checkpoints.len() - 1;
        let stats = vanilla.global_stats();
        let reward_at = |g: usize| {
            stats
                .iter()
                .find(|(s, _)| *s == g)
                .map(|(_, st)| st.mean_train_reward)
                .ok_or_else(|| CliError::Core(Error::MissingArtifact(format!("step stats at {g}"))))
        };
        let v_sel = find(vanilla, &vs.selected)?;
        let r_sel = find(rloop, &rloop.summary.selected)?;
        let d = differential(vanilla, rloop, Split::ValOOD)?;
        let windows: Vec<usize> = rloop.summary.checkpoints.iter().map(|e| e.iteration).collect();
        let theta_last = rloop.summary.iteration_ends.last();
        Ok(SeedComparison {
            seed: rloop.summary.master_seed,
            config_hash: rloop.summary.config_hash.clone(),
            k,
            vanilla_peak_step: vs.checkpoints[peak].global_step,
            vanilla_peak_pass: passes[peak],
            vanilla_final_step: vs.checkpoints[last].global_step,
            vanilla_final_pass: passes[last],
            train_reward_at_peak: reward_at(vs.checkpoints[peak].global_step)?,
            train_reward_at_final: reward_at(vs.checkpoints[last].global_step)?,
            vanilla_selected: v_sel.label.clone(),
            vanilla_selected_pass: ood_pass(v_sel, k)?,
            vanilla_selected_avg: v_sel.val_ood.avg_at_n,
            rloop_selected: r_sel.label.clone(),
            rloop_selected_pass: ood_pass(r_sel, k)?,
            rloop_selected_avg: r_sel.val_ood.avg_at_n,
            rloop_final_pass: theta_last.and_then(|e| e.val_ood.pass(k)),
            rloop_final_avg: theta_last.map(|e| e.val_ood.avg_at_n),
            inter_iteration_diff_forgetting: inter_window_mean(&d, &windows)?,
        })
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// Directional summaries over paired seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalSummary {
    pub seeds: Vec<SeedComparison>,
    pub median_train_reward_at_final: f64,
    pub median_train_reward_at_peak: f64,
    pub median_vanilla_final_pass: f64,
    pub median_vanilla_peak_pass: f64,
    pub median_rloop_pass: f64,
    pub median_vanilla_pass: f64,
    pub median_rloop_avg: f64,
    pub median_vanilla_avg: f64,
    /// Seeds where the loop's selected pass@k is strictly higher.
    pub strict_pass_wins: usize,
    pub median_diff_forgetting: f64,
}

impl DirectionalSummary {
    pub fn new(seeds: Vec<SeedComparison>) -> Self {
        let m = |f: fn(&SeedComparison) -> f64| median(&seeds.iter().map(f).collect::<Vec<_>>());
        DirectionalSummary {
            median_train_reward_at_final: m(|s| s.train_reward_at_final),
            median_train_reward_at_peak: m(|s| s.train_reward_at_peak),
            median_vanilla_final_pass: m(|s| s.vanilla_final_pass),
            median_vanilla_peak_pass: m(|s| s.vanilla_peak_pass),
            median_rloop_pass: m(|s| s.rloop_selected_pass),
            median_vanilla_pass: m(|s| s.vanilla_selected_pass),
            median_rloop_avg: m(|s| s.rloop_selected_avg),
            median_vanilla_avg: m(|s| s.vanilla_selected_avg),
            strict_pass_wins: seeds.iter().filter(|s| s.rloop_selected_pass > s.vanilla_selected_pass).count(),
            median_diff_forgetting: m(|s| s.inter_iteration_diff_forgetting),
            seeds,
        }
    }

    /// Train reward keeps rising past the OOD peak while OOD pass@k at the
    /// end is no better than at the peak.
    pub fn vanilla_overfits(&self) -> bool {
        self.median_train_reward_at_final > self.median_train_reward_at_peak
            && self.median_vanilla_final_pass <= self.median_vanilla_peak_pass
    }

    /// Median pass@k and avg@N of the selected loop checkpoint at least
    /// match vanilla's, with strict pass@k wins in at least `min_strict` seeds.
    pub fn rloop_at_least_vanilla(&self, min_strict: usize) -> bool {
        self.median_rloop_pass >= self.median_vanilla_pass
            && self.median_rloop_avg >= self.median_vanilla_avg
            && self.strict_pass_wins >= min_strict
    }

    pub fn rloop_forgets_less(&self) -> bool {
        self.median_diff_forgetting >= 0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even_lengths() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
