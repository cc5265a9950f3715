//! Scripted waypoint expert used to produce demonstrations.

use super::tasks::Goal;
use super::world::{World, GRASP_RADIUS, MAX_TRANSLATION};

pub const HOVER_Z: f64 = 0.16;
/// Release when the held object's bottom is this far above its rest height.
pub const RELEASE_CLEARANCE: f64 = 0.01;
const REACHED: f64 = 0.004;
const KNOB_PRESS_Z: f64 = 0.015;
const _: () = assert!(KNOB_PRESS_Z < GRASP_RADIUS);

pub type Action = [f32; 7];

fn toward(from: [f64; 3], to: [f64; 3], grip: f32) -> Action {
    let d = [to[0] - from[0], to[1] - from[1], to[2] - from[2]];
    let m = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let s = if m > MAX_TRANSLATION { MAX_TRANSLATION / m } else { 1.0 };
    [
        (d[0] * s) as f32,
        (d[1] * s) as f32,
        (d[2] * s) as f32,
        0.0,
        0.0,
        0.0,
        grip,
    ]
}

fn hold(grip: f32) -> Action {
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, grip]
}

fn dxy(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Move to `target` via the hover plane: lift straight up if low and far,
/// cross at hover height, then descend.
fn approach(g: [f64; 3], target: [f64; 3], grip: f32) -> Action {
    let far = dxy(g, target) > REACHED;
    if far {
        if g[2] < HOVER_Z - 0.01 && dxy(g, target) > 0.02 {
            toward(g, [g[0], g[1], HOVER_Z], grip)
        } else {
            toward(g, [target[0], target[1], HOVER_Z.max(target[2])], grip)
        }
    } else {
        toward(g, target, grip)
    }
}

fn reached(g: [f64; 3], target: [f64; 3]) -> bool {
    dxy(g, target) <= REACHED && (g[2] - target[2]).abs() <= REACHED
}

/// Pick `object` and carry it until its center is at `drop` (gripper coords).
fn pick_and_carry(world: &World, object: usize, drop: [f64; 3]) -> Action {
    let g = &world.gripper;
    match g.held {
        Some(i) if i == object => {
            let off = g.held_offset;
            let target = [drop[0] - off[0], drop[1] - off[1], drop[2] - off[2]];
            if reached(g.pos, target) {
                hold(0.0)
            } else {
                approach(g.pos, target, 1.0)
            }
        }
        Some(_) => hold(0.0),
        None => {
            let o = world.objects[object].pos;
            if reached(g.pos, o) {
                hold(1.0)
            } else {
                approach(g.pos, o, 0.0)
            }
        }
    }
}

/// Next action for the first unmet goal, or a hold-open once done.
pub fn scripted_expert(world: &World) -> Action {
    let Some(goal) = world.task.goals.get(world.progress) else {
        return hold(0.0);
    };
    let g = &world.gripper;
    match goal {
        Goal::Place { object, region, offset } => {
            let (Some(i), Some(r)) = (world.object_index(object), world.region(region)) else {
                return hold(0.0);
            };
            let half = world.objects[i].spec.shape.half_height();
            let drop = [
                r.center[0] + offset[0],
                r.center[1] + offset[1],
                half + RELEASE_CLEARANCE,
            ];
            pick_and_carry(world, i, drop)
        }
        Goal::Stack { upper, lower } => {
            let (Some(u), Some(l)) = (world.object_index(upper), world.object_index(lower)) else {
                return hold(0.0);
            };
            let lo = &world.objects[l];
            let half = world.objects[u].spec.shape.half_height();
            let drop = [lo.pos[0], lo.pos[1], lo.top() + half + RELEASE_CLEARANCE];
            pick_and_carry(world, u, drop)
        }
        Goal::Toggle { region } => {
            let Some(k) = world.region(region).and_then(|r| r.knob_center()) else {
                return hold(0.0);
            };
            if g.held.is_some() {
                return hold(0.0);
            }
            let press = [k[0], k[1], k[2] + KNOB_PRESS_Z];
            if reached(g.pos, press) {
                // Open first if already closed so the next close is an edge.
                hold(if g.closed { 0.0 } else { 1.0 })
            } else {
                approach(g.pos, press, 0.0)
            }
        }
    }
}

/// Expert actions for the next `k` steps, simulated on a copy of `world`.
pub fn expert_chunk(world: &World, k: usize) -> Vec<Action> {
    let mut sim = world.clone();
    (0..k)
        .map(|_| {
            let a = scripted_expert(&sim);
            sim.step(&a);
            a
        })
        .collect()
}

/// Result of running the expert from reset.
#[derive(Clone, Debug)]
pub struct ExpertRollout {
    pub actions: Vec<Action>,
    pub success: bool,
    pub steps: usize,
}

pub fn run_expert(world: &mut World, max_steps: usize) -> ExpertRollout {
    let mut actions = Vec::new();
    while actions.len() < max_steps && !world.check_success() {
        let a = scripted_expert(world);
        world.step(&a);
        actions.push(a);
    }
    ExpertRollout {
        success: world.check_success(),
        steps: actions.len(),
        actions,
    }
}
