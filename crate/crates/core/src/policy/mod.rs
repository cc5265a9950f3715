//! Fused-sequence policy: encoders, depth tokens and action queries through a
//! small transformer to a chunk of `K` actions.

pub mod config;
pub mod episode;
pub mod model;

pub use config::{denormalize_action, normalize_action, Ablation, ModelConfig, ACTION_DIM, ACTION_SCALE};
pub use episode::{ActionChunk, CallCounters, CounterSnapshot, EpisodeContext, MaskSource, Policy};
pub use model::{
    action_head, backbone_forward, fuse, training_loss, BatchInputs, Block, ForwardOutput, FusedLayout, Layout,
    PolicyParams, SampleInputs,
};
