//! Ray-cast renderer producing RGB, metric z-depth and a per-pixel id buffer
//! in one pass.

use serde::{Deserialize, Serialize};

use super::world::{region_color, Region, World};
use crate::geometry::{CameraIntrinsics, DepthImage};
use crate::image::{BinaryMask, RgbImage};

pub const IMAGE_SIZE: usize = 64;

/// Id-buffer codes.
pub const ID_TABLE: u16 = 0;
pub const ID_OBJECT_BASE: u16 = 1;
pub const ID_REGION_BASE: u16 = 32;
pub const ID_GRIPPER: u16 = 255;

const LIGHT: [f64; 3] = [0.267_261_2, -0.534_522_5, 0.801_783_7];
const TABLE_COLOR: [f32; 3] = [0.80, 0.70, 0.52];
const FLOOR_COLOR: [f32; 3] = [0.32, 0.32, 0.36];
const GRIPPER_COLOR: [f32; 3] = [0.82, 0.82, 0.86];
const REGION_HALF_HEIGHT: f64 = 0.001;

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Rigid camera pose. `rows` are the camera x (right), y (down) and z
/// (forward) axes expressed in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: [f64; 3],
    pub rows: [[f64; 3]; 3],
}

impl CameraPose {
    pub fn look_at(position: [f64; 3], target: [f64; 3], up: [f64; 3]) -> Self {
        let f = normalize([
            target[0] - position[0],
            target[1] - position[1],
            target[2] - position[2],
        ]);
        let r = normalize(cross(f, up));
        let d = cross(f, r);
        CameraPose {
            position,
            rows: [r, d, f],
        }
    }

    pub fn world_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [
            p[0] - self.position[0],
            p[1] - self.position[1],
            p[2] - self.position[2],
        ];
        [dot(self.rows[0], d), dot(self.rows[1], d), dot(self.rows[2], d)]
    }

    pub fn camera_to_world(&self, c: [f64; 3]) -> [f64; 3] {
        let mut out = self.position;
        for (axis, &k) in self.rows.iter().zip(&c) {
            for i in 0..3 {
                out[i] += axis[i] * k;
            }
        }
        out
    }

    fn direction_to_world(&self, c: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (axis, &k) in self.rows.iter().zip(&c) {
            for i in 0..3 {
                out[i] += axis[i] * k;
            }
        }
        out
    }
}

/// Static third-person camera and optional wrist camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub static_pose: CameraPose,
    pub static_intrinsics: CameraIntrinsics,
    pub wrist_intrinsics: Option<CameraIntrinsics>,
    /// Wrist camera height above the gripper tip.
    pub wrist_height: f64,
}

impl CameraRig {
    pub fn new(wrist: bool) -> Self {
        let c = (IMAGE_SIZE as f64 - 1.0) / 2.0;
        CameraRig {
            static_pose: CameraPose::look_at([0.5, -0.3, 0.8], [0.5, 0.45, 0.0], [0.0, 0.0, 1.0]),
            static_intrinsics: CameraIntrinsics::new(68.0, 68.0, c, c, IMAGE_SIZE, IMAGE_SIZE)
                .expect("static intrinsics"),
            wrist_intrinsics: wrist
                .then(|| CameraIntrinsics::new(36.0, 36.0, c, c, IMAGE_SIZE, IMAGE_SIZE).expect("wrist intrinsics")),
            wrist_height: 0.12,
        }
    }

    /// Looks straight down from above the gripper; image x follows world +x.
    pub fn wrist_pose(&self, world: &World) -> CameraPose {
        let p = world.gripper.pos;
        CameraPose {
            position: [p[0], p[1], p[2] + self.wrist_height],
            rows: [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]],
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Prim {
    Sphere { c: [f64; 3], r: f64 },
    Aabb { lo: [f64; 3], hi: [f64; 3] },
    Cylinder { c: [f64; 3], r: f64, h: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Item {
    prim: Prim,
    color: [f32; 3],
    id: u16,
}

fn hit_sphere(o: [f64; 3], d: [f64; 3], c: [f64; 3], r: f64) -> Option<(f64, [f64; 3])> {
    let oc = [o[0] - c[0], o[1] - c[1], o[2] - c[2]];
    let a = dot(d, d);
    let b = dot(oc, d);
    let cc = dot(oc, oc) - r * r;
    let disc = b * b - a * cc;
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / a;
    if t <= 0.0 {
        return None;
    }
    let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
    Some((t, [(p[0] - c[0]) / r, (p[1] - c[1]) / r, (p[2] - c[2]) / r]))
}

fn hit_aabb(o: [f64; 3], d: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, [f64; 3])> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    let mut sign = 1.0;
    for i in 0..3 {
        if d[i].abs() < 1e-15 {
            if o[i] < lo[i] || o[i] > hi[i] {
                return None;
            }
            continue;
        }
        let mut t0 = (lo[i] - o[i]) / d[i];
        let mut t1 = (hi[i] - o[i]) / d[i];
        let mut s = -1.0;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
            s = 1.0;
        }
        if t0 > t_near {
            t_near = t0;
            axis = i;
            sign = s;
        }
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_near <= 0.0 {
        return None;
    }
    let mut n = [0.0; 3];
    n[axis] = sign;
    Some((t_near, n))
}

fn hit_cylinder(o: [f64; 3], d: [f64; 3], c: [f64; 3], r: f64, h: f64) -> Option<(f64, [f64; 3])> {
    let mut best: Option<(f64, [f64; 3])> = None;
    let mut consider = |t: f64, n: [f64; 3]| {
        if t > 0.0 && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, n));
        }
    };
    let (ox, oy) = (o[0] - c[0], o[1] - c[1]);
    let a = d[0] * d[0] + d[1] * d[1];
    if a > 1e-15 {
        let b = ox * d[0] + oy * d[1];
        let cc = ox * ox + oy * oy - r * r;
        let disc = b * b - a * cc;
        if disc >= 0.0 {
            let t = (-b - disc.sqrt()) / a;
            let z = o[2] + t * d[2];
            if (z - c[2]).abs() <= h {
                let px = ox + t * d[0];
                let py = oy + t * d[1];
                consider(t, [px / r, py / r, 0.0]);
            }
        }
    }
    if d[2].abs() > 1e-15 {
        for (zc, nz) in [(c[2] + h, 1.0), (c[2] - h, -1.0)] {
            let t = (zc - o[2]) / d[2];
            let px = ox + t * d[0];
            let py = oy + t * d[1];
            if px * px + py * py <= r * r {
                consider(t, [0.0, 0.0, nz]);
            }
        }
    }
    best
}

fn intersect(item: &Item, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3])> {
    match item.prim {
        Prim::Sphere { c, r } => hit_sphere(o, d, c, r),
        Prim::Aabb { lo, hi } => hit_aabb(o, d, lo, hi),
        Prim::Cylinder { c, r, h } => hit_cylinder(o, d, c, r, h),
    }
}

fn region_items(regions: &[Region]) -> Vec<Item> {
    let mut items = Vec::new();
    for (j, r) in regions.iter().enumerate() {
        let id = ID_REGION_BASE + j as u16;
        items.push(Item {
            prim: Prim::Cylinder {
                c: [r.center[0], r.center[1], REGION_HALF_HEIGHT],
                r: r.radius,
                h: REGION_HALF_HEIGHT,
            },
            color: region_color(&r.name, r.on),
            id,
        });
        if let Some(k) = r.knob_center() {
            let half = Region::knob_half();
            items.push(Item {
                prim: Prim::Aabb {
                    lo: [k[0] - half[0], k[1] - half[1], k[2] - half[2]],
                    hi: [k[0] + half[0], k[1] + half[1], k[2] + half[2]],
                },
                color: if r.on { [0.95, 0.2, 0.1] } else { [0.6, 0.6, 0.6] },
                id,
            });
        }
    }
    items
}

fn scene_items(world: &World, with_gripper: bool) -> Vec<Item> {
    use super::world::Shape;
    let mut items = region_items(&world.regions);
    for (i, o) in world.objects.iter().enumerate() {
        let c = o.pos;
        let prim = match o.spec.shape {
            Shape::Sphere { radius } => Prim::Sphere { c, r: radius },
            Shape::Box { half } => Prim::Aabb {
                lo: [c[0] - half[0], c[1] - half[1], c[2] - half[2]],
                hi: [c[0] + half[0], c[1] + half[1], c[2] + half[2]],
            },
            Shape::Cylinder { radius, half_height } => Prim::Cylinder {
                c,
                r: radius,
                h: half_height,
            },
        };
        items.push(Item {
            prim,
            color: o.spec.color,
            id: ID_OBJECT_BASE + i as u16,
        });
    }
    if with_gripper {
        let g = &world.gripper;
        let p = g.pos;
        let hx = 0.012 + 0.016 * g.aperture;
        items.push(Item {
            prim: Prim::Aabb {
                lo: [p[0] - hx, p[1] - 0.012, p[2] + 0.005],
                hi: [p[0] + hx, p[1] + 0.012, p[2] + 0.035],
            },
            color: GRIPPER_COLOR,
            id: ID_GRIPPER,
        });
        items.push(Item {
            prim: Prim::Cylinder {
                c: [p[0], p[1], p[2] + 0.12],
                r: 0.008,
                h: 0.085,
            },
            color: GRIPPER_COLOR,
            id: ID_GRIPPER,
        });
    }
    items
}

/// One rendered view.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub ids: Vec<u16>,
    pub intrinsics: CameraIntrinsics,
}

impl Frame {
    pub fn mask_of(&self, id: u16) -> BinaryMask {
        BinaryMask {
            width: self.depth.width,
            height: self.depth.height,
            bits: self.ids.iter().map(|&i| i == id).collect(),
        }
    }
}

fn shade(color: [f32; 3], n: [f64; 3]) -> [f32; 3] {
    let lambert = dot(n, LIGHT).max(0.0);
    let k = (0.45 + 0.55 * lambert) as f32;
    [color[0] * k, color[1] * k, color[2] * k]
}

fn render_items(items: &[Item], pose: &CameraPose, k: &CameraIntrinsics) -> Frame {
    let (w, h) = (k.width, k.height);
    let mut rgb = vec![0.0f32; w * h * 3];
    let mut depth = vec![0.0f32; w * h];
    let mut ids = vec![ID_TABLE; w * h];
    let o = pose.position;
    for v in 0..h {
        for u in 0..w {
            let d = pose.direction_to_world(k.ray(u as f64, v as f64));
            let mut best_t = f64::INFINITY;
            let mut best_n = [0.0, 0.0, 1.0];
            let mut best_color = FLOOR_COLOR;
            let mut best_id = ID_TABLE;
            if d[2] < 0.0 {
                best_t = -o[2] / d[2];
                let x = o[0] + best_t * d[0];
                let y = o[1] + best_t * d[1];
                best_color = if (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y) {
                    TABLE_COLOR
                } else {
                    FLOOR_COLOR
                };
            }
            for item in items {
                if let Some((t, n)) = intersect(item, o, d) {
                    if t < best_t {
                        best_t = t;
                        best_n = n;
                        best_color = item.color;
                        best_id = item.id;
                    }
                }
            }
            let idx = v * w + u;
            // Ray direction has unit camera-z, so the hit parameter is the
            // z-depth. A ray that escapes the scene has no valid depth.
            depth[idx] = if best_t.is_finite() { best_t as f32 } else { 0.0 };
            ids[idx] = best_id;
            let c = if best_t.is_finite() {
                shade(best_color, best_n)
            } else {
                FLOOR_COLOR
            };
            rgb[idx * 3..idx * 3 + 3].copy_from_slice(&c);
        }
    }
    Frame {
        rgb: RgbImage {
            width: w,
            height: h,
            data: rgb,
        },
        depth: DepthImage {
            width: w,
            height: h,
            values: depth,
        },
        ids,
        intrinsics: *k,
    }
}

pub fn render_static(world: &World, rig: &CameraRig) -> Frame {
    render_items(&scene_items(world, true), &rig.static_pose, &rig.static_intrinsics)
}

/// Wrist view, or `None` when the rig has no wrist camera. The gripper's own
/// body is left out: it sits between the lens and the scene.
pub fn render_wrist(world: &World, rig: &CameraRig) -> Option<Frame> {
    let k = rig.wrist_intrinsics?;
    Some(render_items(&scene_items(world, false), &rig.wrist_pose(world), &k))
}

/// Id-buffer code for a named entity in `world`.
pub fn entity_id(world: &World, name: &str) -> Option<u16> {
    if let Some(i) = world.object_index(name) {
        return Some(ID_OBJECT_BASE + i as u16);
    }
    world
        .regions
        .iter()
        .position(|r| r.name == name)
        .map(|j| ID_REGION_BASE + j as u16)
}

/// Per-entity masks plus the gripper mask, all from the frame's id buffer.
/// Unknown names get an empty mask and `found = false`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityMasks {
    pub entities: Vec<(String, BinaryMask, bool)>,
    pub gripper: BinaryMask,
}

pub fn ground_truth_masks(world: &World, frame: &Frame, names: &[String]) -> EntityMasks {
    let (w, h) = (frame.depth.width, frame.depth.height);
    let entities = names
        .iter()
        .map(|n| match entity_id(world, n) {
            Some(id) => (n.clone(), frame.mask_of(id), true),
            None => {
                log::warn!("entity {n:?} not in scene; empty mask");
                (n.clone(), BinaryMask::empty(w, h), false)
            }
        })
        .collect();
    EntityMasks {
        entities,
        gripper: frame.mask_of(ID_GRIPPER),
    }
}
