//! Operational surface: datasets, training, evaluation, ablations, latency.

pub mod ablate;
pub mod bench;
pub mod cavt;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod train;

pub use cavt::{CavtData, CavtTensor};
pub use checkpoint::{check_compatible, load_checkpoint, save_checkpoint, CheckpointIndex};
pub use config::{DataConfig, EvalConfig, PathsConfig, RunConfig, TrainConfig};
pub use dataset::{generate_dataset, load_dataset, manifest_hash, DatasetManifest, EpisodeRecord};
pub use eval::{
    evaluate_tasks, run_episode, suite_tasks, Agent, Controller, EvalOptions, MetricsRow, SuiteReport, TimingRow,
};
pub use train::{train, TrainOutcome};
