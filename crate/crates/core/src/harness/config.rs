use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::error::{Error, Result};
use crate::policy::{Ablation, ModelConfig};
use crate::roi::DetectorNoiseModel;
use crate::sim::task_by_id;
use crate::sim::tasks::DEFAULT_TRAIN_TASKS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Task ids to record demonstrations for.
    pub tasks: Vec<String>,
    pub demos_per_task: usize,
    pub max_demo_steps: usize,
    /// Std (meters) of Gaussian noise added to the executed expert
    /// translation at full speed, scaled down with the commanded speed. The
    /// data then covers states slightly off the expert path.
    pub action_noise: f64,
    /// Seeds tried per requested demo before giving up.
    pub attempts_per_demo: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            tasks: DEFAULT_TRAIN_TASKS.iter().map(|s| s.to_string()).collect(),
            demos_per_task: 25,
            max_demo_steps: 200,
            action_noise: 0.003,
            attempts_per_demo: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub warmup_steps: usize,
    /// Cosine schedule floor as a fraction of the peak rate.
    pub min_lr_fraction: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub log_every: usize,
    /// Held-out seen-task check every this many steps; 0 disables.
    pub eval_every: usize,
    pub eval_trials: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 16,
            adam: AdamConfig::default(),
            warmup_steps: 100,
            min_lr_fraction: 0.05,
            grad_clip: 1.0,
            log_every: 50,
            eval_every: 1000,
            eval_trials: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub trials: usize,
    pub max_steps: usize,
    /// Episodes per task whose query frames are dumped as PPM.
    pub dump_episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            trials: 50,
            max_steps: 300,
            dump_episodes: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub runs: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data: "data".into(),
            runs: "runs".into(),
        }
    }
}

/// Everything a run depends on. Loaded from JSON; unknown keys are errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: Ablation,
    pub detector: DetectorNoiseModel,
    pub paths: PathsConfig,
    pub single_thread: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.detector.validate()?;
        if self.data.tasks.is_empty() {
            return Err(Error::Config("data.tasks is empty".into()));
        }
        for t in &self.data.tasks {
            task_by_id(t).map_err(|_| Error::Config(format!("unknown task {t:?}")))?;
        }
        if self.data.demos_per_task == 0 || self.data.attempts_per_demo == 0 {
            return Err(Error::Config(
                "demos_per_task and attempts_per_demo must be positive".into(),
            ));
        }
        if !(self.data.action_noise >= 0.0 && self.data.action_noise.is_finite()) {
            return Err(Error::Config("action_noise must be finite and >= 0".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.train.adam.lr.is_nan()
            || self.train.adam.lr <= 0.0
            || !(0.0..=1.0).contains(&self.train.min_lr_fraction)
        {
            return Err(Error::Config("invalid learning-rate schedule".into()));
        }
        if self.eval.trials == 0 || self.eval.max_steps == 0 {
            return Err(Error::Config("eval trials and max_steps must be positive".into()));
        }
        Ok(())
    }
}
