//! World state, scene sampling, gripper dynamics and success predicates.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tasks::{Goal, TaskSpec};
use crate::error::{Error, Result};

pub const MAX_TRANSLATION: f64 = 0.05;
pub const MAX_ROTATION: f64 = 0.2;
pub const GRASP_RADIUS: f64 = 0.03;
pub const STACK_TOLERANCE: f64 = 0.02;
pub const REGION_RADIUS: f64 = 0.065;
pub const PLACEMENT_TRIES: usize = 100;
/// Spawn area for objects (x range, y range).
pub const SPAWN_X: (f64, f64) = (0.2, 0.8);
pub const SPAWN_Y: (f64, f64) = (0.2, 0.5);
pub const Z_MIN: f64 = 0.005;
pub const GRIPPER_MAX_WIDTH: f64 = 0.1;
const KNOB_OFFSET_Y: f64 = -0.1;
const KNOB_HALF: [f64; 3] = [0.015, 0.015, 0.012];
const SPACING_MARGIN: f64 = 0.02;
const REGION_SLOTS_X: [f64; 4] = [0.26, 0.42, 0.58, 0.74];
const REGION_ROW_Y: f64 = 0.7;
const REGION_JITTER: f64 = 0.01;
const DISTRACTORS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Box { half: [f64; 3] },
    Sphere { radius: f64 },
    Cylinder { radius: f64, half_height: f64 },
}

impl Shape {
    pub fn half_height(&self) -> f64 {
        match *self {
            Shape::Box { half } => half[2],
            Shape::Sphere { radius } => radius,
            Shape::Cylinder { half_height, .. } => half_height,
        }
    }

    /// Radius of the horizontal footprint's bounding circle.
    pub fn footprint(&self) -> f64 {
        match *self {
            Shape::Box { half } => half[0].hypot(half[1]),
            Shape::Sphere { radius } => radius,
            Shape::Cylinder { radius, .. } => radius,
        }
    }

    /// Width the gripper closes on.
    pub fn grip_width(&self) -> f64 {
        match *self {
            Shape::Box { half } => 2.0 * half[0].min(half[1]),
            Shape::Sphere { radius } => 2.0 * radius,
            Shape::Cylinder { radius, .. } => 2.0 * radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    pub shape: Shape,
    pub color: [f32; 3],
}

/// Catalogue entry for every name in the object vocabulary.
pub fn object_spec(name: &str) -> Option<ObjectSpec> {
    let (shape, color) = match name {
        "ball" => (Shape::Sphere { radius: 0.03 }, [0.15, 0.35, 0.9]),
        "orange" => (Shape::Sphere { radius: 0.032 }, [1.0, 0.55, 0.05]),
        "red block" => (Shape::Box { half: [0.028; 3] }, [0.85, 0.1, 0.1]),
        "white bowl" => (
            Shape::Cylinder {
                radius: 0.042,
                half_height: 0.018,
            },
            [0.96, 0.96, 0.96],
        ),
        "mug" => (
            Shape::Cylinder {
                radius: 0.028,
                half_height: 0.035,
            },
            [0.95, 0.8, 0.15],
        ),
        "ketchup" => (
            Shape::Box {
                half: [0.02, 0.02, 0.045],
            },
            [0.6, 0.05, 0.1],
        ),
        "chocolate pudding" => (
            Shape::Box {
                half: [0.03, 0.022, 0.02],
            },
            [0.45, 0.25, 0.1],
        ),
        "cream cheese" => (
            Shape::Box {
                half: [0.03, 0.02, 0.018],
            },
            [0.75, 0.85, 0.95],
        ),
        "first pot" | "second pot" => (
            Shape::Cylinder {
                radius: 0.038,
                half_height: 0.03,
            },
            [0.3, 0.3, 0.36],
        ),
        "left bowl" | "right bowl" => (
            Shape::Cylinder {
                radius: 0.04,
                half_height: 0.018,
            },
            [0.2, 0.65, 0.3],
        ),
        _ => return None,
    };
    Some(ObjectSpec {
        name: name.into(),
        shape,
        color,
    })
}

/// Region color when idle and, for the stove, when switched on.
pub fn region_color(name: &str, on: bool) -> [f32; 3] {
    match (name, on) {
        ("stove", true) => [0.9, 0.3, 0.1],
        ("stove", false) => [0.15, 0.15, 0.15],
        ("basket", _) => [0.55, 0.38, 0.18],
        ("plate", _) => [0.72, 0.78, 0.95],
        ("tray", _) => [0.55, 0.3, 0.65],
        _ => [0.5, 0.5, 0.5],
    }
}

/// Objects that may appear as distractors.
const DISTRACTOR_POOL: [&str; 8] = [
    "ball",
    "orange",
    "red block",
    "white bowl",
    "mug",
    "ketchup",
    "chocolate pudding",
    "cream cheese",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub spec: ObjectSpec,
    /// Center of the primitive.
    pub pos: [f64; 3],
}

impl ObjectInstance {
    pub fn top(&self) -> f64 {
        self.pos[2] + self.spec.shape.half_height()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub center: [f64; 2],
    pub radius: f64,
    pub on: bool,
    pub has_knob: bool,
}

impl Region {
    /// Center of the control knob box, if any.
    pub fn knob_center(&self) -> Option<[f64; 3]> {
        self.has_knob
            .then(|| [self.center[0], self.center[1] + KNOB_OFFSET_Y, KNOB_HALF[2]])
    }

    pub fn knob_half() -> [f64; 3] {
        KNOB_HALF
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gripper {
    pub pos: [f64; 3],
    pub rpy: [f64; 3],
    /// 1 fully open, 0 fully closed.
    pub aperture: f64,
    pub closed: bool,
    pub held: Option<usize>,
    /// Held object's center minus gripper position, fixed at grasp time.
    pub held_offset: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub task: TaskSpec,
    pub seed: u64,
    pub objects: Vec<ObjectInstance>,
    pub regions: Vec<Region>,
    pub gripper: Gripper,
    pub steps: u32,
    /// Number of goals reached so far, in order.
    pub progress: usize,
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn xy(p: [f64; 3]) -> [f64; 2] {
    [p[0], p[1]]
}

fn wrap_angle(a: f64) -> f64 {
    let t = std::f64::consts::TAU;
    let mut r = (a + std::f64::consts::PI).rem_euclid(t) - std::f64::consts::PI;
    if r <= -std::f64::consts::PI {
        r += t;
    }
    r
}

impl World {
    /// Sample a scene for `task`: regions in a shuffled row at the back of the
    /// table, task objects then distractors placed collision-free in front.
    pub fn reset(task: &TaskSpec, seed: u64) -> Result<World> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut names: Vec<&str> = crate::lang::grammar::LOCATION_NAMES.to_vec();
        names.shuffle(&mut rng);
        let regions = names
            .iter()
            .zip(REGION_SLOTS_X)
            .map(|(name, x)| Region {
                name: name.to_string(),
                center: [
                    x + rng.random_range(-REGION_JITTER..=REGION_JITTER),
                    REGION_ROW_Y + rng.random_range(-REGION_JITTER..=REGION_JITTER),
                ],
                radius: REGION_RADIUS,
                on: false,
                has_knob: *name == "stove",
            })
            .collect();

        let task_objects = task.task_objects();
        let mut pool: Vec<&str> = DISTRACTOR_POOL
            .iter()
            .copied()
            .filter(|n| !task_objects.iter().any(|t| t == n))
            .collect();
        pool.shuffle(&mut rng);
        let mut scene: Vec<String> = task_objects.clone();
        scene.extend(pool.iter().take(DISTRACTORS).map(|s| s.to_string()));

        let mut objects: Vec<ObjectInstance> = Vec::with_capacity(scene.len());
        for name in &scene {
            let spec = object_spec(name).ok_or_else(|| Error::UnknownTask(format!("object {name:?}")))?;
            let r = spec.shape.footprint();
            let mut placed = None;
            for _ in 0..PLACEMENT_TRIES {
                let p = [
                    rng.random_range(SPAWN_X.0..SPAWN_X.1),
                    rng.random_range(SPAWN_Y.0..SPAWN_Y.1),
                ];
                let free = objects
                    .iter()
                    .all(|o| dist2(p, xy(o.pos)) >= r + o.spec.shape.footprint() + SPACING_MARGIN);
                if free {
                    placed = Some(p);
                    break;
                }
            }
            let p = placed.ok_or_else(|| Error::Placement {
                task: task.id.clone(),
                tries: PLACEMENT_TRIES,
            })?;
            let z = spec.shape.half_height();
            objects.push(ObjectInstance {
                spec,
                pos: [p[0], p[1], z],
            });
        }
        // "left"/"right" are from the static camera, which looks along +y.
        let li = objects.iter().position(|o| o.spec.name == "left bowl");
        let ri = objects.iter().position(|o| o.spec.name == "right bowl");
        if let (Some(l), Some(r)) = (li, ri) {
            if objects[l].pos[0] > objects[r].pos[0] {
                let tmp = objects[l].pos;
                objects[l].pos = objects[r].pos;
                objects[r].pos = tmp;
            }
        }

        let gripper = Gripper {
            pos: [
                0.5 + rng.random_range(-0.05..=0.05),
                0.2 + rng.random_range(-0.03..=0.03),
                0.25 + rng.random_range(-0.03..=0.03),
            ],
            rpy: [0.0; 3],
            aperture: 1.0,
            closed: false,
            held: None,
            held_offset: [0.0; 3],
        };

        Ok(World {
            task: task.clone(),
            seed,
            objects,
            regions,
            gripper,
            steps: 0,
            progress: 0,
        })
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.spec.name == name)
    }

    pub fn object(&self, name: &str) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.spec.name == name)
    }

    pub fn region(&self, name: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.name == name)
    }

    /// Height at which a released object comes to rest at `pos`: on the
    /// table or on top of the highest object under its center.
    fn rest_height(&self, idx: usize, pos: [f64; 3]) -> f64 {
        let half = self.objects[idx].spec.shape.half_height();
        let mut z = half;
        for (j, o) in self.objects.iter().enumerate() {
            if j == idx || self.gripper.held == Some(j) || o.pos[2] > pos[2] {
                continue;
            }
            if dist2(xy(pos), xy(o.pos)) < o.spec.shape.footprint() {
                z = z.max(o.top() + half);
            }
        }
        z
    }

    /// Advance one control step. Deltas are clamped, never rejected. A
    /// non-finite entry is treated as zero.
    pub fn step(&mut self, action: &[f32; 7]) {
        let a: Vec<f64> = action
            .iter()
            .map(|&v| if v.is_finite() { v as f64 } else { 0.0 })
            .collect();
        let g = &mut self.gripper;
        for (i, &v) in a.iter().enumerate().take(3) {
            let d = v.clamp(-MAX_TRANSLATION, MAX_TRANSLATION);
            let lo = if i == 2 { Z_MIN } else { 0.0 };
            g.pos[i] = (g.pos[i] + d).clamp(lo, 1.0);
        }
        for i in 0..3 {
            let d = a[3 + i].clamp(-MAX_ROTATION, MAX_ROTATION);
            if d != 0.0 {
                g.rpy[i] = wrap_angle(g.rpy[i] + d);
            }
        }
        let close = a[6] > 0.5;
        let closing_edge = close && !g.closed;
        g.closed = close;

        if close {
            if closing_edge {
                let p = g.pos;
                for r in &mut self.regions {
                    if let Some(k) = r.knob_center() {
                        if dist3(p, k) <= GRASP_RADIUS {
                            r.on = !r.on;
                        }
                    }
                }
            }
            if self.gripper.held.is_none() {
                let p = self.gripper.pos;
                let nearest = self
                    .objects
                    .iter()
                    .enumerate()
                    .map(|(i, o)| (i, dist3(p, o.pos)))
                    .filter(|&(_, d)| d <= GRASP_RADIUS)
                    .min_by(|x, y| x.1.total_cmp(&y.1));
                if let Some((i, _)) = nearest {
                    let o = self.objects[i].pos;
                    self.gripper.held = Some(i);
                    self.gripper.held_offset = [o[0] - p[0], o[1] - p[1], o[2] - p[2]];
                }
            }
        } else if let Some(i) = self.gripper.held.take() {
            let pos = self.objects[i].pos;
            self.objects[i].pos[2] = self.rest_height(i, pos);
        }

        let g = &mut self.gripper;
        g.aperture = match (g.closed, g.held) {
            (false, _) => 1.0,
            (true, None) => 0.0,
            (true, Some(i)) => (self.objects[i].spec.shape.grip_width() / GRIPPER_MAX_WIDTH).min(1.0),
        };
        if let Some(i) = g.held {
            let p = g.pos;
            let off = g.held_offset;
            self.objects[i].pos = [p[0] + off[0], p[1] + off[1], p[2] + off[2]];
        }

        self.steps += 1;
        while self.progress < self.task.goals.len() && self.goal_holds(&self.task.goals[self.progress]) {
            self.progress += 1;
        }
    }

    pub fn goal_holds(&self, goal: &Goal) -> bool {
        let released = |idx: usize| self.gripper.held != Some(idx) && !self.gripper.closed;
        match goal {
            Goal::Place { object, region, .. } => {
                let (Some(i), Some(r)) = (self.object_index(object), self.region(region)) else {
                    return false;
                };
                released(i) && dist2(xy(self.objects[i].pos), r.center) <= r.radius
            }
            Goal::Stack { upper, lower } => {
                let (Some(u), Some(l)) = (self.object_index(upper), self.object_index(lower)) else {
                    return false;
                };
                let (up, lo) = (&self.objects[u], &self.objects[l]);
                let resting = (up.pos[2] - (lo.top() + up.spec.shape.half_height())).abs() < 1e-3;
                released(u) && dist2(xy(up.pos), xy(lo.pos)) <= STACK_TOLERANCE && resting
            }
            Goal::Toggle { region } => self.region(region).is_some_and(|r| r.on),
        }
    }

    /// All goals reached in order and still holding.
    pub fn check_success(&self) -> bool {
        self.progress == self.task.goals.len() && self.task.goals.iter().all(|g| self.goal_holds(g))
    }

    /// `[x, y, z, roll, pitch, yaw, aperture, closed]`.
    pub fn proprio(&self) -> [f32; 8] {
        let g = &self.gripper;
        [
            g.pos[0] as f32,
            g.pos[1] as f32,
            g.pos[2] as f32,
            g.rpy[0] as f32,
            g.rpy[1] as f32,
            g.rpy[2] as f32,
            g.aperture as f32,
            if g.closed { 1.0 } else { 0.0 },
        ]
    }

    /// True when every pose lies in the workspace cube.
    pub fn in_bounds(&self) -> bool {
        let inside = |p: &[f64; 3]| p.iter().all(|v| (0.0..=1.0).contains(v));
        inside(&self.gripper.pos) && self.objects.iter().all(|o| inside(&o.pos))
    }
}
