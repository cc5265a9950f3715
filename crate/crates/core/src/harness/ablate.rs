//! Train and evaluate every ablation on one dataset and seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::load_checkpoint;
use super::config::RunConfig;
use super::eval::{evaluate_tasks, suite_tasks, write_csv, Agent, EvalOptions};
use super::train::{train, MANIFEST_HASH_FILE};
use crate::error::{Error, Result};
use crate::policy::Ablation;

pub const REPORT_CSV: &str = "ablation.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: String,
    pub seen: f64,
    pub unseen: f64,
    pub seen_trials: usize,
    pub unseen_trials: usize,
    pub convergence_step: usize,
    pub dataset_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Whether the full model's unseen score is at least every ablation's.
    pub full_leads_unseen: bool,
}

/// Runs go to `out/<tag>`; the comparison goes to `out/ablation.csv`.
pub fn ablate(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(Ablation::REPORT.len());
    for ablation in Ablation::REPORT {
        let run_cfg = RunConfig {
            ablation,
            ..cfg.clone()
        };
        let dir = out.join(ablation.tag());
        let outcome = train(&run_cfg, data_dir, &dir)?;
        let (policy, index) = load_checkpoint(&outcome.checkpoint)?;
        let score = |suite: &str| -> Result<(f64, usize)> {
            let tasks = suite_tasks(suite, &index.tasks)?;
            let report = evaluate_tasks(
                Agent::Policy(&policy),
                &tasks,
                &EvalOptions::from_config(&run_cfg, suite),
            )?;
            report.write(&dir.join(format!("eval_{suite}")))?;
            Ok((report.mean_success(), report.metrics.iter().map(|m| m.trials).sum()))
        };
        let (seen, seen_trials) = score("seen")?;
        let (unseen, unseen_trials) = score("unseen")?;
        let hash_path = dir.join(MANIFEST_HASH_FILE);
        let hash = std::fs::read_to_string(&hash_path).map_err(|e| Error::io(&hash_path, e))?;
        rows.push(AblationRow {
            ablation: ablation.tag(),
            seen,
            unseen,
            seen_trials,
            unseen_trials,
            convergence_step: outcome.convergence_step,
            dataset_sha256: hash.trim().to_string(),
        });
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_csv(&out.join(REPORT_CSV), &rows)?;
    let full = rows[0].unseen;
    let full_leads_unseen = rows[1..].iter().all(|r| full >= r.unseen);
    log::info!(
        "full model unseen {:.3} {} every ablation",
        full,
        if full_leads_unseen { ">=" } else { "is not >=" }
    );
    Ok(AblationReport {
        rows,
        full_leads_unseen,
    })
}
