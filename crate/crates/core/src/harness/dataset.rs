//! Expert demonstration datasets on disk.
//!
//! One directory per episode holding CAVT tensors and a `meta.json`; a
//! top-level `manifest.json` lists every file with its sha256.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::cavt::CavtTensor;
use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthImage};
use crate::image::{BinaryMask, RgbImage};
use crate::lang::{decompose_rule_based, CoTPlan, Instruction, Vocabulary};
use crate::roi::{detect_entities, extract_entities, union_track_masks};
use crate::seed;
use crate::sim::world::MAX_TRANSLATION;
use crate::sim::{expert_chunk, observe, task_by_id, Action, CameraRig, Observation, World, WristView, IMAGE_SIZE};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub dir: String,
    pub task_id: String,
    pub seed: u64,
    pub steps: usize,
    pub files: Vec<FileEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub tasks: Vec<String>,
    pub episodes: Vec<EpisodeEntry>,
    pub vocabulary: Vocabulary,
    pub config: RunConfig,
    /// Seeds dropped because the expert failed on them.
    pub excluded: Vec<(String, u64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub task_id: String,
    pub seed: u64,
    pub instruction: String,
    pub plan: CoTPlan,
    pub steps: usize,
    pub chunk: usize,
    pub success: bool,
    pub intrinsics: CameraIntrinsics,
    pub wrist_intrinsics: Option<CameraIntrinsics>,
}

/// A demonstration held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub meta: EpisodeMeta,
    /// `[S, H, W, 3]` bytes.
    pub rgb: Vec<u8>,
    /// `[S, H, W]` meters.
    pub depth: Vec<f32>,
    pub proprio: Vec<[f32; 8]>,
    /// Expert chunk from each visited state, `[S, K, 7]` world units.
    pub labels: Vec<f32>,
    /// Actions actually applied, for replay.
    pub executed: Vec<Action>,
    /// Union of detected entity masks over the whole demonstration.
    pub roi: BinaryMask,
    pub wrist_rgb: Option<Vec<u8>>,
    pub wrist_depth: Option<Vec<f32>>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.meta.steps
    }

    pub fn is_empty(&self) -> bool {
        self.meta.steps == 0
    }

    pub fn instruction(&self) -> Instruction {
        Instruction::parse(&self.meta.instruction)
    }

    pub fn observation(&self, t: usize) -> Result<Observation> {
        let px = IMAGE_SIZE * IMAGE_SIZE;
        let rgb = RgbImage::from_u8(IMAGE_SIZE, IMAGE_SIZE, &self.rgb[t * px * 3..(t + 1) * px * 3])?;
        let depth = DepthImage::new(IMAGE_SIZE, IMAGE_SIZE, self.depth[t * px..(t + 1) * px].to_vec())?;
        let wrist = match (&self.wrist_rgb, &self.wrist_depth, self.meta.wrist_intrinsics) {
            (Some(r), Some(d), Some(k)) => Some(WristView {
                rgb: RgbImage::from_u8(IMAGE_SIZE, IMAGE_SIZE, &r[t * px * 3..(t + 1) * px * 3])?,
                depth: DepthImage::new(IMAGE_SIZE, IMAGE_SIZE, d[t * px..(t + 1) * px].to_vec())?,
                intrinsics: k,
            }),
            _ => None,
        };
        Ok(Observation {
            rgb,
            depth,
            intrinsics: self.meta.intrinsics,
            wrist,
            proprio: self.proprio[t],
        })
    }

    /// Expert chunk label at step `t`, `K` world-unit actions.
    pub fn label(&self, t: usize) -> &[f32] {
        let n = self.meta.chunk * 7;
        &self.labels[t * n..(t + 1) * n]
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Record one expert demonstration. `None` when the expert fails.
pub fn record_episode(cfg: &RunConfig, task_id: &str, episode_seed: u64) -> Result<Option<EpisodeRecord>> {
    let task = task_by_id(task_id)?;
    let mut world = World::reset(&task, episode_seed)?;
    let rig = CameraRig::new(cfg.model.wrist);
    let instr = Instruction::parse(&task.instruction);
    let plan = decompose_rule_based(&instr);
    let entities = extract_entities(&instr);
    let k = cfg.model.chunk;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed::derive(episode_seed, seed::stream::EXPERT_NOISE, 0));
    let normal = Normal::new(0.0, cfg.data.action_noise.max(1e-12)).map_err(|e| Error::Config(e.to_string()))?;

    let mut rgb = Vec::new();
    let mut depth = Vec::new();
    let mut wrist_rgb = Vec::new();
    let mut wrist_depth = Vec::new();
    let mut proprio = Vec::new();
    let mut labels = Vec::new();
    let mut executed = Vec::new();
    let mut frame_masks = Vec::new();
    let mut intrinsics = None;
    let mut wrist_intrinsics = None;
    while executed.len() < cfg.data.max_demo_steps && !world.check_success() {
        let t = executed.len() as u64;
        let (obs, frame) = observe(&world, &rig);
        intrinsics = Some(obs.intrinsics);
        rgb.extend(obs.rgb.to_u8());
        depth.extend_from_slice(&obs.depth.values);
        if let Some(w) = &obs.wrist {
            wrist_intrinsics = Some(w.intrinsics);
            wrist_rgb.extend(w.rgb.to_u8());
            wrist_depth.extend_from_slice(&w.depth.values);
        }
        proprio.push(obs.proprio);
        if !entities.is_empty() {
            let dets = detect_entities(
                &world,
                &frame,
                &entities,
                &cfg.detector,
                seed::derive(episode_seed, seed::stream::DETECTOR, t),
            );
            frame_masks.push(dets.into_iter().map(|d| d.mask).collect::<Vec<_>>());
        }
        let chunk = expert_chunk(&world, k);
        labels.extend(chunk.iter().flatten());
        let mut a = chunk[0];
        if cfg.data.action_noise > 0.0 {
            // Scaled by commanded speed so waypoints can still be reached.
            let speed = a[..3].iter().map(|v| v * v).sum::<f32>().sqrt() / MAX_TRANSLATION as f32;
            for v in a.iter_mut().take(3) {
                *v += speed * normal.sample(&mut noise_rng) as f32;
            }
        }
        world.step(&a);
        executed.push(a);
    }
    if !world.check_success() {
        return Ok(None);
    }
    let roi = if frame_masks.is_empty() {
        BinaryMask::empty(IMAGE_SIZE, IMAGE_SIZE)
    } else {
        union_track_masks(&frame_masks, None)?
    };
    let steps = executed.len();
    Ok(Some(EpisodeRecord {
        meta: EpisodeMeta {
            task_id: task_id.to_string(),
            seed: episode_seed,
            instruction: task.instruction.clone(),
            plan,
            steps,
            chunk: k,
            success: true,
            intrinsics: intrinsics.expect("at least one step"),
            wrist_intrinsics,
        },
        rgb,
        depth,
        proprio,
        labels,
        executed,
        roi,
        wrist_rgb: cfg.model.wrist.then_some(wrist_rgb),
        wrist_depth: cfg.model.wrist.then_some(wrist_depth),
    }))
}

fn episode_files(ep: &EpisodeRecord) -> Result<Vec<(String, Vec<u8>)>> {
    let s = ep.len();
    let (h, w) = (IMAGE_SIZE, IMAGE_SIZE);
    let mut files = vec![
        ("meta.json".to_string(), serde_json::to_vec_pretty(&ep.meta)?),
        (
            "rgb.cavt".into(),
            CavtTensor::u8(&[s, h, w, 3], ep.rgb.clone()).encode()?,
        ),
        (
            "depth.cavt".into(),
            CavtTensor::f32(&[s, h, w], ep.depth.clone()).encode()?,
        ),
        (
            "proprio.cavt".into(),
            CavtTensor::f32(&[s, 8], ep.proprio.iter().flatten().copied().collect()).encode()?,
        ),
        (
            "labels.cavt".into(),
            CavtTensor::f32(&[s, ep.meta.chunk, 7], ep.labels.clone()).encode()?,
        ),
        (
            "executed.cavt".into(),
            CavtTensor::f32(&[s, 7], ep.executed.iter().flatten().copied().collect()).encode()?,
        ),
        (
            "roi.cavt".into(),
            CavtTensor::u8(&[h, w], ep.roi.bits.iter().map(|&b| b as u8).collect()).encode()?,
        ),
    ];
    if let (Some(r), Some(d)) = (&ep.wrist_rgb, &ep.wrist_depth) {
        files.push((
            "wrist_rgb.cavt".into(),
            CavtTensor::u8(&[s, h, w, 3], r.clone()).encode()?,
        ));
        files.push((
            "wrist_depth.cavt".into(),
            CavtTensor::f32(&[s, h, w], d.clone()).encode()?,
        ));
    }
    Ok(files)
}

/// Record `demos_per_task` successful demonstrations for each configured
/// task and write them under `out`.
/// One demo slot: the kept episode, if any, and the seeds that failed.
type Attempted = (Option<EpisodeRecord>, Vec<(String, u64)>);

pub fn generate_dataset(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let jobs: Vec<(usize, String, usize)> = cfg
        .data
        .tasks
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..cfg.data.demos_per_task).map(move |j| (ti, t.clone(), j)))
        .collect();
    let attempts = cfg.data.attempts_per_demo;
    let results: Vec<Result<Attempted>> = jobs
        .par_iter()
        .map(|(ti, task, j)| {
            let mut failed = Vec::new();
            for a in 0..attempts {
                let index = ((*ti as u64) << 32) | (*j * attempts + a) as u64;
                let s = seed::derive(cfg.seed, seed::stream::TRAIN_EPISODE, index);
                match record_episode(cfg, task, s)? {
                    Some(ep) => return Ok((Some(ep), failed)),
                    None => {
                        log::warn!("expert failed on {task} seed {s}; excluded");
                        failed.push((task.clone(), s));
                    }
                }
            }
            Ok((None, failed))
        })
        .collect();

    let mut written: Vec<PathBuf> = Vec::new();
    let outcome = (|| -> Result<DatasetManifest> {
        let mut episodes = Vec::new();
        let mut excluded = Vec::new();
        for ((_, task, j), r) in jobs.iter().zip(results) {
            let (ep, failed) = r?;
            excluded.extend(failed);
            let Some(ep) = ep else {
                return Err(Error::Dataset(format!(
                    "expert failed {attempts} times for {task} demo {j}"
                )));
            };
            let dir_name = format!("ep_{task}_{j:04}");
            let dir = out.join(&dir_name);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            written.push(dir.clone());
            let mut files = Vec::new();
            for (name, bytes) in episode_files(&ep)? {
                let path = dir.join(&name);
                std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
                files.push(FileEntry {
                    name,
                    sha256: sha256_hex(&bytes),
                    bytes: bytes.len() as u64,
                });
            }
            episodes.push(EpisodeEntry {
                dir: dir_name,
                task_id: task.clone(),
                seed: ep.meta.seed,
                steps: ep.len(),
                files,
            });
        }
        let manifest = DatasetManifest {
            version: MANIFEST_VERSION,
            tasks: cfg.data.tasks.clone(),
            episodes,
            vocabulary: Vocabulary::build(),
            config: cfg.clone(),
            excluded,
        };
        let path = out.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    })();
    if outcome.is_err() {
        for d in &written {
            let _ = std::fs::remove_dir_all(d);
        }
        let _ = std::fs::remove_file(out.join(MANIFEST_FILE));
    }
    outcome
}

/// sha256 of the manifest file itself, used to tie runs to their data.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_slice(&bytes)?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Dataset(format!("unsupported manifest version {}", m.version)));
    }
    Ok(m)
}

/// Load every episode, verifying checksums and the vocabulary snapshot.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<EpisodeRecord>)> {
    let manifest = read_manifest(dir)?;
    if manifest.vocabulary != Vocabulary::build() {
        return Err(Error::Dataset("vocabulary snapshot does not match this build".into()));
    }
    let episodes = manifest
        .episodes
        .iter()
        .map(|e| load_episode(&dir.join(&e.dir), e))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, episodes))
}

fn load_episode(dir: &Path, entry: &EpisodeEntry) -> Result<EpisodeRecord> {
    let read = |name: &str| -> Result<Option<Vec<u8>>> {
        let Some(f) = entry.files.iter().find(|f| f.name == name) else {
            return Ok(None);
        };
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != f.sha256 {
            return Err(Error::Dataset(format!("checksum mismatch for {}", path.display())));
        }
        Ok(Some(bytes))
    };
    let need =
        |b: Option<Vec<u8>>, name: &str| b.ok_or_else(|| Error::Dataset(format!("{} missing {name}", entry.dir)));
    let meta: EpisodeMeta = serde_json::from_slice(&need(read("meta.json")?, "meta.json")?)?;
    let tensor = |b: Vec<u8>| CavtTensor::decode(&b);
    let rgb = tensor(need(read("rgb.cavt")?, "rgb")?)?.into_u8()?;
    let depth = tensor(need(read("depth.cavt")?, "depth")?)?.into_f32()?;
    let proprio = tensor(need(read("proprio.cavt")?, "proprio")?)?.into_f32()?;
    let labels = tensor(need(read("labels.cavt")?, "labels")?)?.into_f32()?;
    let executed = tensor(need(read("executed.cavt")?, "executed")?)?.into_f32()?;
    let roi = tensor(need(read("roi.cavt")?, "roi")?)?.into_u8()?;
    let wrist_rgb = read("wrist_rgb.cavt")?
        .map(tensor)
        .transpose()?
        .map(|t| t.into_u8())
        .transpose()?;
    let wrist_depth = read("wrist_depth.cavt")?
        .map(tensor)
        .transpose()?
        .map(|t| t.into_f32())
        .transpose()?;
    let s = meta.steps;
    let px = IMAGE_SIZE * IMAGE_SIZE;
    if rgb.len() != s * px * 3
        || depth.len() != s * px
        || proprio.len() != s * 8
        || labels.len() != s * meta.chunk * 7
        || executed.len() != s * 7
    {
        return Err(Error::Dataset(format!(
            "{}: tensor lengths disagree with {s} steps",
            entry.dir
        )));
    }
    Ok(EpisodeRecord {
        rgb,
        depth,
        proprio: proprio.chunks(8).map(|c| c.try_into().unwrap()).collect(),
        labels,
        executed: executed.chunks(7).map(|c| c.try_into().unwrap()).collect(),
        roi: BinaryMask::from_bits(IMAGE_SIZE, IMAGE_SIZE, roi.iter().map(|&b| b != 0).collect())?,
        wrist_rgb,
        wrist_depth,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> RunConfig {
        let mut c = RunConfig::default();
        c.data.tasks = vec!["ball_basket".into(), "mug_tray".into()];
        c.data.demos_per_task = 3;
        c
    }

    #[test]
    fn generate_load_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let m = generate_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(m.episodes.len(), 6);
        let dirs = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().is_dir())
            .count();
        assert_eq!(dirs, m.episodes.len());
        let (_, eps) = load_dataset(dir.path()).unwrap();
        for ep in &eps {
            assert!(ep.meta.success);
            assert!(!ep.roi.is_empty());
            let task = task_by_id(&ep.meta.task_id).unwrap();
            let mut w = World::reset(&task, ep.meta.seed).unwrap();
            for a in &ep.executed {
                w.step(a);
            }
            assert!(w.check_success());
            let obs = ep.observation(ep.len() - 1).unwrap();
            assert_eq!(obs.proprio, ep.proprio[ep.len() - 1]);
        }

        let again = tempfile::tempdir().unwrap();
        let m2 = generate_dataset(&cfg, again.path()).unwrap();
        assert_eq!(m.episodes, m2.episodes);
        assert_eq!(manifest_hash(dir.path()).unwrap(), manifest_hash(again.path()).unwrap());
    }

    #[test]
    fn tampered_file_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg();
        cfg.data.tasks.truncate(1);
        cfg.data.demos_per_task = 1;
        let m = generate_dataset(&cfg, dir.path()).unwrap();
        let p = dir.path().join(&m.episodes[0].dir).join("proprio.cavt");
        let mut bytes = std::fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(_))));
    }
}
