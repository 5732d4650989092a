use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{run, EpochReport, EvalMetrics, TrainConfig};
use crate::error::{Error, Result};
use crate::intrinsic::RewardMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub sigma: f64,
    /// Team-mean dynamics training MSE of the last epoch.
    pub final_dyn_mse: Option<f64>,
    /// Per-entry squared error of the noisy reward-time predictions,
    /// averaged over all epochs of the run.
    pub reward_mse: Option<f64>,
    pub final_eval_reward: f64,
    /// `final_eval_reward` minus that of the noiseless run.
    pub reward_delta: f64,
}

fn sigma_label(sigma: f64) -> String {
    format!("sigma_{sigma}")
}

/// Trains the noiseless baseline and then one run per `sigma`, all from the
/// same config and seed. The first row is the baseline.
pub fn noise_ablation(
    config: &TrainConfig,
    sigmas: &[f64],
    out_root: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    if !matches!(
        config.reward_mode,
        RewardMode::ElignSelf | RewardMode::ElignTeam | RewardMode::ElignAdv
    ) {
        return Err(Error::InvalidConfig(format!(
            "noise ablation needs an elign reward mode, got {}",
            config.reward_mode.name()
        )));
    }
    if let Some(bad) = sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(Error::InvalidConfig(format!(
            "noise sigma must be finite and non-negative, got {bad}"
        )));
    }
    let mut rows: Vec<AblationRow> = Vec::with_capacity(sigmas.len() + 1);
    for sigma in std::iter::once(0.0).chain(sigmas.iter().copied()) {
        let mut cfg = config.clone();
        cfg.noise_sigma = sigma;
        let dir = out_root.map(|root| root.join(sigma_label(sigma)));
        let outcome = run(cfg, dir.as_deref())?;
        let last = outcome.reports.last().expect("at least one epoch");
        let n_team = config.task.n_agents;
        let dyn_mse: Vec<f64> = last.dyn_mse[..n_team].iter().flatten().copied().collect();
        let final_eval_reward = last.eval.reward_mean;
        let baseline = rows.first().map_or(final_eval_reward, |r| r.final_eval_reward);
        rows.push(AblationRow {
            sigma,
            final_dyn_mse: (!dyn_mse.is_empty())
                .then(|| dyn_mse.iter().sum::<f64>() / dyn_mse.len() as f64),
            reward_mse: run_reward_mse(&outcome.reports),
            final_eval_reward,
            reward_delta: final_eval_reward - baseline,
        });
    }
    Ok(rows)
}

/// Mean of the per-epoch reward-time MSE. A single epoch's estimate has a
/// sampling spread of about `sigma^2 * sqrt(2 / entries)`, which can exceed
/// the model's own error.
pub fn run_reward_mse(reports: &[EpochReport]) -> Option<f64> {
    let v: Vec<f64> = reports.iter().filter_map(|r| r.reward_mse).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub n_agents: usize,
    pub epochs_run: usize,
    pub final_eval: EvalMetrics,
}

/// One training run per team size, with landmarks and adversaries scaled
/// as the task prescribes. Every count is validated before any training.
pub fn scale_sweep(
    base: &TrainConfig,
    agent_counts: &[usize],
    out_root: Option<&Path>,
) -> Result<Vec<ScaleRow>> {
    if agent_counts.is_empty() {
        return Err(Error::InvalidConfig("scale sweep needs at least one agent count".into()));
    }
    let configs = agent_counts
        .iter()
        .map(|&n| {
            let mut cfg = base.clone();
            cfg.task = base.task.scaled(n);
            cfg.validate().map(|_| cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    configs
        .into_iter()
        .map(|cfg| {
            let n = cfg.task.n_agents;
            let dir = out_root.map(|root| root.join(format!("n_{n}")));
            let outcome = run(cfg, dir.as_deref())?;
            Ok(ScaleRow {
                n_agents: n,
                epochs_run: outcome.reports.len(),
                final_eval: outcome.reports.last().expect("at least one epoch").eval.clone(),
            })
        })
        .collect()
}
