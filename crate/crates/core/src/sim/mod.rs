//! Procedural RGB-D tabletop world.

pub mod expert;
pub mod render;
pub mod tasks;
pub mod world;

pub use expert::{expert_chunk, run_expert, scripted_expert, Action, ExpertRollout};
pub use render::{
    ground_truth_masks, render_static, render_wrist, CameraPose, CameraRig, EntityMasks, Frame, IMAGE_SIZE,
};
pub use tasks::{all_tasks, suite, task_by_id, Goal, Split, TaskSpec};
pub use world::{ObjectSpec, Shape, World};

use crate::geometry::{CameraIntrinsics, DepthImage};
use crate::image::RgbImage;

/// End-effector position, roll/pitch/yaw, aperture and closed flag.
pub const PROPRIO_DIM: usize = 8;

/// One timestep of sensing.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub intrinsics: CameraIntrinsics,
    pub wrist: Option<WristView>,
    pub proprio: [f32; PROPRIO_DIM],
}

#[derive(Clone, Debug, PartialEq)]
pub struct WristView {
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub intrinsics: CameraIntrinsics,
}

/// Render every camera on the rig. Also returns the static frame for
/// callers that need its id buffer.
pub fn observe(world: &World, rig: &CameraRig) -> (Observation, Frame) {
    let frame = render_static(world, rig);
    let wrist = render_wrist(world, rig).map(|f| WristView {
        rgb: f.rgb,
        depth: f.depth,
        intrinsics: f.intrinsics,
    });
    let obs = Observation {
        rgb: frame.rgb.clone(),
        depth: frame.depth.clone(),
        intrinsics: frame.intrinsics,
        wrist,
        proprio: world.proprio(),
    };
    (obs, frame)
}
