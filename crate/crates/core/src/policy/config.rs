use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roi::PoolingConfig;
use crate::sim::world::{MAX_ROTATION, MAX_TRANSLATION};

/// Number of action dimensions: six pose deltas and the gripper command.
pub const ACTION_DIM: usize = 7;

/// Per-dimension scale between world actions and the normalized targets the
/// head regresses.
pub const ACTION_SCALE: [f32; ACTION_DIM] = [
    MAX_TRANSLATION as f32,
    MAX_TRANSLATION as f32,
    MAX_TRANSLATION as f32,
    MAX_ROTATION as f32,
    MAX_ROTATION as f32,
    MAX_ROTATION as f32,
    1.0,
];

pub fn normalize_action(a: &[f32; ACTION_DIM]) -> [f32; ACTION_DIM] {
    std::array::from_fn(|i| a[i] / ACTION_SCALE[i])
}

pub fn denormalize_action(a: &[f32]) -> [f32; ACTION_DIM] {
    std::array::from_fn(|i| {
        let v = a[i] * ACTION_SCALE[i];
        if i == ACTION_DIM - 1 {
            v.clamp(0.0, 1.0)
        } else {
            v
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub d_v: usize,
    pub d_l: usize,
    pub d_p: usize,
    pub image_size: usize,
    pub patch: usize,
    pub t_max: usize,
    /// Chunk length K.
    pub chunk: usize,
    /// Actions executed per query, m <= K.
    pub execute: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub max_len: usize,
    pub wrist: bool,
    /// Points fed to each depth encoder per step.
    pub depth_points: usize,
    pub penalty_weight: f64,
    pub pooling: PoolingConfig,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            d_v: 64,
            d_l: 64,
            d_p: 8,
            image_size: 64,
            patch: 8,
            t_max: 64,
            chunk: 8,
            execute: 8,
            layers: 2,
            heads: 4,
            mlp_hidden: 128,
            max_len: 256,
            wrist: false,
            depth_points: 64,
            penalty_weight: 1e-3,
            pooling: PoolingConfig::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if [
            self.d,
            self.d_v,
            self.d_l,
            self.d_p,
            self.t_max,
            self.chunk,
            self.heads,
            self.depth_points,
        ]
        .contains(&0)
        {
            return bad("model widths and counts must be positive".into());
        }
        if self.d_p != crate::sim::PROPRIO_DIM {
            return bad(format!(
                "d_p {} must equal the proprio width {}",
                self.d_p,
                crate::sim::PROPRIO_DIM
            ));
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return bad(format!(
                "patch {} does not tile image size {}",
                self.patch, self.image_size
            ));
        }
        if self.d % self.heads != 0 {
            return bad(format!("d={} not divisible by {} heads", self.d, self.heads));
        }
        if self.execute == 0 || self.execute > self.chunk {
            return bad(format!("execute {} must be in 1..={}", self.execute, self.chunk));
        }
        if self.penalty_weight < 0.0 || !self.penalty_weight.is_finite() {
            return bad("penalty_weight must be finite and >= 0".into());
        }
        self.pooling.validate()
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch;
        g * g
    }

    pub fn views(&self) -> usize {
        1 + self.wrist as usize
    }
}

/// Which pipeline stages are bypassed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_cot: bool,
    pub no_depth: bool,
    pub no_roi: bool,
}

impl Ablation {
    pub const NONE: Ablation = Ablation {
        no_cot: false,
        no_depth: false,
        no_roi: false,
    };
    pub const NO_COT: Ablation = Ablation {
        no_cot: true,
        ..Ablation::NONE
    };
    pub const NO_DEPTH: Ablation = Ablation {
        no_depth: true,
        ..Ablation::NONE
    };
    pub const NO_ROI: Ablation = Ablation {
        no_roi: true,
        ..Ablation::NONE
    };
    /// The report rows, in order.
    pub const REPORT: [Ablation; 4] = [Ablation::NONE, Ablation::NO_COT, Ablation::NO_DEPTH, Ablation::NO_ROI];

    pub fn tag(&self) -> String {
        let mut parts = Vec::new();
        if self.no_cot {
            parts.push("no-cot");
        }
        if self.no_depth {
            parts.push("no-depth");
        }
        if self.no_roi {
            parts.push("no-roi");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = Ablation::NONE;
        if s == "none" {
            return Ok(out);
        }
        for part in s.split('+') {
            match part {
                "no-cot" => out.no_cot = true,
                "no-depth" => out.no_depth = true,
                "no-roi" => out.no_roi = true,
                _ => return Err(Error::Config(format!("unknown ablation {part:?}"))),
            }
        }
        Ok(out)
    }
}
