//! Task-aware region-of-interest pipeline: entity extraction, oracle detection
//! with a noise model, mask union over a track, and patch pooling.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::image::BinaryMask;
use crate::lang::{Instruction, Template};
use crate::seed;
use crate::sim::render::{entity_id, Frame, ID_GRIPPER, ID_OBJECT_BASE};
use crate::sim::World;

pub type RoiMask = BinaryMask;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySet {
    pub objects: Vec<String>,
    pub locations: Vec<String>,
}

impl EntitySet {
    pub fn is_empty(&self) -> bool {
        self.objects.is_empty() && self.locations.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.objects.iter().chain(&self.locations).cloned().collect()
    }
}

/// Slot values split by role. Unmatched instructions give an empty set.
pub fn extract_entities(instr: &Instruction) -> EntitySet {
    let Some(template) = instr.task_id else {
        return EntitySet::default();
    };
    let s = &instr.slots;
    let mut set = EntitySet::default();
    if template == Template::BothOn {
        if let Some(k) = &s.kind {
            set.objects = vec![format!("first {k}"), format!("second {k}")];
        }
    }
    for o in [&s.object, &s.object2].into_iter().flatten() {
        if !set.objects.contains(o) {
            set.objects.push(o.clone());
        }
    }
    for l in [&s.location, &s.location2].into_iter().flatten() {
        if !set.locations.contains(l) {
            set.locations.push(l.clone());
        }
    }
    set
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorNoiseModel {
    pub swap_prob: f64,
    pub jitter_px: u32,
    pub dilate_px: u32,
}

impl DetectorNoiseModel {
    pub fn none() -> Self {
        DetectorNoiseModel {
            swap_prob: 0.0,
            jitter_px: 0,
            dilate_px: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.swap_prob) {
            return Err(Error::Config(format!("swap_prob {} outside [0, 1]", self.swap_prob)));
        }
        Ok(())
    }
}

impl Default for DetectorNoiseModel {
    fn default() -> Self {
        DetectorNoiseModel {
            swap_prob: 0.05,
            jitter_px: 1,
            dilate_px: 0,
        }
    }
}

/// Shift by `(dx, dy)` pixels; vacated pixels are 0.
pub fn translate(mask: &BinaryMask, dx: i32, dy: i32) -> BinaryMask {
    let mut out = BinaryMask::empty(mask.width, mask.height);
    for h in 0..mask.height {
        for w in 0..mask.width {
            if !mask.get(w, h) {
                continue;
            }
            let (nw, nh) = (w as i64 + dx as i64, h as i64 + dy as i64);
            if nw >= 0 && nh >= 0 && (nw as usize) < mask.width && (nh as usize) < mask.height {
                out.set(nw as usize, nh as usize, true);
            }
        }
    }
    out
}

/// Dilation by a `(2r+1)²` square, clipped at the borders.
pub fn dilate(mask: &BinaryMask, r: u32) -> BinaryMask {
    if r == 0 {
        return mask.clone();
    }
    let r = r as usize;
    let (wd, ht) = (mask.width, mask.height);
    // Separable: rows then columns.
    let mut rows = BinaryMask::empty(wd, ht);
    for h in 0..ht {
        for w in 0..wd {
            let lo = w.saturating_sub(r);
            let hi = (w + r).min(wd - 1);
            if (lo..=hi).any(|x| mask.get(x, h)) {
                rows.set(w, h, true);
            }
        }
    }
    let mut out = BinaryMask::empty(wd, ht);
    for h in 0..ht {
        for w in 0..wd {
            let lo = h.saturating_sub(r);
            let hi = (h + r).min(ht - 1);
            if (lo..=hi).any(|y| rows.get(w, y)) {
                out.set(w, h, true);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub name: String,
    pub mask: BinaryMask,
    /// False when the entity is not in the scene.
    pub found: bool,
    pub swapped: bool,
}

/// Oracle detector: ground-truth id-buffer masks, perturbed by `noise`.
/// Deterministic in `seed`.
pub fn detect_entities(
    world: &World,
    frame: &Frame,
    entities: &EntitySet,
    noise: &DetectorNoiseModel,
    seed: u64,
) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = entities.names();
    let distractors: Vec<u16> = world
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| !names.contains(&o.spec.name))
        .map(|(i, _)| ID_OBJECT_BASE + i as u16)
        .collect();
    names
        .iter()
        .map(|name| {
            let Some(id) = entity_id(world, name) else {
                log::warn!("entity {name:?} not in scene");
                return Detection {
                    name: name.clone(),
                    mask: BinaryMask::empty(frame.depth.width, frame.depth.height),
                    found: false,
                    swapped: false,
                };
            };
            let is_object = world.object_index(name).is_some();
            let mut chosen = id;
            let mut swapped = false;
            // Always draw, so the stream does not depend on branch outcomes.
            let u: f64 = rng.random();
            if is_object && u < noise.swap_prob {
                if let Some(&d) = distractors.choose(&mut rng) {
                    chosen = d;
                    swapped = true;
                }
            }
            let mut mask = frame.mask_of(chosen);
            if noise.jitter_px > 0 {
                let j = noise.jitter_px as i32;
                let dx = rng.random_range(-j..=j);
                let dy = rng.random_range(-j..=j);
                mask = translate(&mask, dx, dy);
            }
            mask = dilate(&mask, noise.dilate_px);
            Detection {
                name: name.clone(),
                mask,
                found: true,
                swapped,
            }
        })
        .collect()
}

/// Pixelwise OR over every mask of every frame, plus `extra` (the gripper
/// mask at inference time).
pub fn union_track_masks(frames: &[Vec<BinaryMask>], extra: Option<&BinaryMask>) -> Result<RoiMask> {
    let first = frames
        .iter()
        .flatten()
        .next()
        .or(extra)
        .ok_or_else(|| Error::InvalidArgument("mask union needs at least one mask".into()))?;
    let mut out = BinaryMask::empty(first.width, first.height);
    for m in frames.iter().flatten().chain(extra) {
        out.or_assign(m)?;
    }
    Ok(out)
}

/// Gripper pixels in a rendered frame.
pub fn gripper_mask(frame: &Frame) -> BinaryMask {
    frame.mask_of(ID_GRIPPER)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolingConfig {
    /// Fraction of masked pixels a patch needs to be kept.
    pub patch_threshold: f64,
    pub disable_prob: f64,
    /// Square dilation applied to the ROI mask before patch selection.
    pub margin_px: u32,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        PoolingConfig {
            patch_threshold: 0.5,
            disable_prob: 0.3,
            margin_px: 4,
        }
    }
}

impl PoolingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.patch_threshold > 0.0 && self.patch_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "patch_threshold {} outside (0, 1]",
                self.patch_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.disable_prob) {
            return Err(Error::Config(format!(
                "disable_prob {} outside [0, 1]",
                self.disable_prob
            )));
        }
        Ok(())
    }
}

/// Per-patch keep flags in row-major patch order. `None` when the mask is
/// empty, meaning pooling is disabled.
pub fn patch_keep(mask: &RoiMask, patch: usize, threshold: f64) -> Result<Option<Vec<bool>>> {
    if patch == 0 || mask.width % patch != 0 || mask.height % patch != 0 {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch} does not tile {}x{}",
            mask.width, mask.height
        )));
    }
    if mask.is_empty() {
        return Ok(None);
    }
    let (gr, gc) = (mask.height / patch, mask.width / patch);
    let need = threshold * (patch * patch) as f64;
    let mut keep = Vec::with_capacity(gr * gc);
    for pr in 0..gr {
        for pc in 0..gc {
            let mut n = 0usize;
            for h in pr * patch..(pr + 1) * patch {
                for w in pc * patch..(pc + 1) * patch {
                    n += mask.get(w, h) as usize;
                }
            }
            keep.push(n as f64 >= need - 1e-9);
        }
    }
    Ok(Some(keep))
}

/// Replace patches outside the ROI with `null`. `patches` is `[P, d]`; the
/// mask must cover the patch grid exactly.
pub fn pool_patches<T: Scalar>(
    patches: &Tensor<T>,
    mask: &RoiMask,
    patch: usize,
    threshold: f64,
    null: &[T],
) -> Result<Tensor<T>> {
    let s = patches.shape();
    if s.len() != 2 || s[1] != null.len() {
        return Err(Error::ShapeMismatch {
            op: "pool_patches",
            lhs: s.to_vec(),
            rhs: vec![null.len()],
        });
    }
    let grid = (mask.width / patch.max(1)) * (mask.height / patch.max(1));
    if grid != s[0] {
        return Err(Error::InvalidArgument(format!(
            "mask {}x{} with patch {} gives {} patches, embeddings have {}",
            mask.width, mask.height, patch, grid, s[0]
        )));
    }
    let Some(keep) = patch_keep(mask, patch, threshold)? else {
        return Ok(patches.clone());
    };
    let d = s[1];
    let mut out = patches.data().to_vec();
    for (p, &k) in keep.iter().enumerate() {
        if !k {
            out[p * d..(p + 1) * d].copy_from_slice(null);
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Per-sample pooling-disable coin, deterministic in `(seed, index)`.
pub fn sample_disable(seed: u64, index: u64, disable_prob: f64) -> bool {
    let x = seed::derive(seed, seed::stream::ROI_DISABLE, index);
    let u = (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    u < disable_prob
}
