//! Per-episode context and closed-loop inference.

use std::sync::atomic::{AtomicU64, Ordering};

use super::config::{denormalize_action, Ablation, ACTION_DIM};
use super::model::{BatchInputs, PolicyParams, SampleInputs};
use crate::autodiff::Tape;
use crate::depth_encoder::prepare_cloud;
use crate::encoders::patchify;
use crate::error::{Error, Result};
use crate::image::BinaryMask;
use crate::lang::{
    decompose_rule_based, tokenize, tokenize_with_plan, CoTPlan, Instruction, TokenSequence, Vocabulary,
};
use crate::roi::{
    detect_entities, dilate, extract_entities, gripper_mask, patch_keep, union_track_masks, DetectorNoiseModel,
    EntitySet, RoiMask,
};
use crate::seed;
use crate::sim::{Frame, Observation, World};

/// `K` world-unit actions.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    pub actions: Vec<[f32; ACTION_DIM]>,
}

/// Where the episode's ROI mask comes from.
pub enum MaskSource<'a> {
    /// Per-frame entity masks recorded along a demonstration.
    Demo(&'a [Vec<BinaryMask>]),
    /// Detector output on the first frame, joined with the gripper mask.
    FirstFrame {
        world: &'a World,
        frame: &'a Frame,
        noise: &'a DetectorNoiseModel,
    },
}

/// Everything computed once before rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeContext {
    pub instruction: Instruction,
    pub plan: Option<CoTPlan>,
    pub tokens: TokenSequence,
    pub entities: EntitySet,
    pub roi: RoiMask,
    /// Patch keep flags, `None` when pooling is off for this episode.
    pub keep: Option<Vec<bool>>,
    pub disabled: bool,
    pub seed: u64,
}

#[derive(Debug, Default)]
pub struct CallCounters {
    pub prepare_episode: AtomicU64,
    pub decompose: AtomicU64,
    pub queries: AtomicU64,
    pub image_encodes: AtomicU64,
    pub text_encodes: AtomicU64,
    pub depth_encodes: AtomicU64,
    pub proprio_encodes: AtomicU64,
}

/// Plain-number copy of [`CallCounters`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub prepare_episode: u64,
    pub decompose: u64,
    pub queries: u64,
    pub image_encodes: u64,
    pub text_encodes: u64,
    pub depth_encodes: u64,
    pub proprio_encodes: u64,
}

impl CallCounters {
    pub fn snapshot(&self) -> CounterSnapshot {
        let g = |c: &AtomicU64| c.load(Ordering::Relaxed);
        CounterSnapshot {
            prepare_episode: g(&self.prepare_episode),
            decompose: g(&self.decompose),
            queries: g(&self.queries),
            image_encodes: g(&self.image_encodes),
            text_encodes: g(&self.text_encodes),
            depth_encodes: g(&self.depth_encodes),
            proprio_encodes: g(&self.proprio_encodes),
        }
    }

    fn bump(c: &AtomicU64) {
        c.fetch_add(1, Ordering::Relaxed);
    }
}

/// Trained parameters plus the fixed pieces needed to run them.
#[derive(Debug)]
pub struct Policy {
    pub params: PolicyParams,
    pub vocab: Vocabulary,
    pub ablation: Ablation,
    pub counters: CallCounters,
}

impl Policy {
    pub fn new(params: PolicyParams, vocab: Vocabulary, ablation: Ablation) -> Result<Self> {
        if vocab.len() != params.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens, parameters expect {}",
                vocab.len(),
                params.vocab_size
            )));
        }
        Ok(Policy {
            params,
            vocab,
            ablation,
            counters: CallCounters::default(),
        })
    }

    /// Instruction tokens (with or without the plan) and the ROI mask.
    pub fn prepare_episode(&self, instr: &Instruction, masks: MaskSource<'_>, seed: u64) -> Result<EpisodeContext> {
        CallCounters::bump(&self.counters.prepare_episode);
        if instr.raw.trim().is_empty() {
            return Err(Error::InvalidArgument("empty instruction".into()));
        }
        let cfg = &self.params.config;
        let (plan, tokens) = if self.ablation.no_cot {
            (None, tokenize(&instr.raw, &self.vocab, cfg.t_max))
        } else {
            CallCounters::bump(&self.counters.decompose);
            let plan = decompose_rule_based(instr);
            let tokens = tokenize_with_plan(&instr.raw, &plan, &self.vocab, cfg.t_max);
            (Some(plan), tokens)
        };
        let entities = extract_entities(instr);
        let side = cfg.image_size;
        let roi = if entities.is_empty() {
            BinaryMask::empty(side, side)
        } else {
            match masks {
                MaskSource::Demo(frames) => union_track_masks(frames, None)?,
                MaskSource::FirstFrame { world, frame, noise } => {
                    let dets = detect_entities(
                        world,
                        frame,
                        &entities,
                        noise,
                        seed::derive(seed, seed::stream::DETECTOR, 0),
                    );
                    let found: Vec<BinaryMask> = dets.into_iter().map(|d| d.mask).collect();
                    union_track_masks(&[found], Some(&gripper_mask(frame)))?
                }
            }
        };
        let roi = dilate(&roi, cfg.pooling.margin_px);
        let keep = if self.ablation.no_roi {
            None
        } else {
            patch_keep(&roi, cfg.patch, cfg.pooling.patch_threshold)?
        };
        let disabled = keep.is_none();
        Ok(EpisodeContext {
            instruction: instr.clone(),
            plan,
            tokens,
            entities,
            roi,
            keep,
            disabled,
            seed,
        })
    }

    /// Model inputs for one observation. `pool` selects whether the
    /// context's keep flags are applied; `point_seed` fixes the subsample.
    pub fn sample_inputs(
        &self,
        obs: &Observation,
        ctx: &EpisodeContext,
        pool: bool,
        point_seed: u64,
    ) -> Result<SampleInputs> {
        let cfg = &self.params.config;
        let static_patches = patchify(&obs.rgb, cfg.patch, cfg.image_size)?;
        let wrist_patches = match (&obs.wrist, cfg.wrist) {
            (Some(w), true) => Some(patchify(&w.rgb, cfg.patch, cfg.image_size)?),
            (_, true) => return Err(Error::InvalidArgument("wrist view enabled but missing".into())),
            (_, false) => None,
        };
        let mut clouds = Vec::new();
        if !self.ablation.no_depth {
            clouds.push(prepare_cloud(
                &obs.depth,
                &obs.intrinsics,
                cfg.depth_points,
                point_seed,
            )?);
            if cfg.wrist {
                let w = obs.wrist.as_ref().expect("checked above");
                clouds.push(prepare_cloud(
                    &w.depth,
                    &w.intrinsics,
                    cfg.depth_points,
                    point_seed ^ 1,
                )?);
            }
        }
        Ok(SampleInputs {
            static_patches,
            wrist_patches,
            keep: if pool { ctx.keep.clone() } else { None },
            tokens: ctx.tokens.ids.clone(),
            proprio: obs.proprio,
            clouds,
        })
    }

    /// One query: encode, pool, fuse, run the backbone and decode `K`
    /// actions. Only the first `execute` of them are meant to be applied
    /// before the next query.
    pub fn rollout_step(&self, obs: &Observation, ctx: &EpisodeContext) -> Result<ActionChunk> {
        let point_seed = seed::derive(ctx.seed, seed::stream::POINTS, 0);
        let sample = self.sample_inputs(obs, ctx, !ctx.disabled, point_seed)?;
        let batch = BatchInputs::collate(std::slice::from_ref(&sample))?;
        let mut tape = Tape::<f32>::new();
        let p = self.params.store.bind_frozen(&mut tape);
        let out = self.params.forward(&mut tape, &p, &batch, !self.ablation.no_depth)?;
        let c = &self.counters;
        CallCounters::bump(&c.queries);
        CallCounters::bump(&c.image_encodes);
        CallCounters::bump(&c.text_encodes);
        CallCounters::bump(&c.proprio_encodes);
        if !self.ablation.no_depth {
            CallCounters::bump(&c.depth_encodes);
        }
        let data = tape.value(out.actions).data();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("predicted action chunk".into()));
        }
        Ok(ActionChunk {
            actions: data.chunks(ACTION_DIM).map(denormalize_action).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ModelConfig;
    use crate::sim::{observe, task_by_id, CameraRig};

    fn policy(ablation: Ablation) -> Policy {
        let vocab = Vocabulary::build();
        let params = PolicyParams::new(&ModelConfig::default(), vocab.len()).unwrap();
        Policy::new(params, vocab, ablation).unwrap()
    }

    fn first_frame() -> (World, Observation, Frame, Instruction) {
        let task = task_by_id("ball_basket").unwrap();
        let world = World::reset(&task, 5).unwrap();
        let (obs, frame) = observe(&world, &CameraRig::new(false));
        (world, obs, frame, Instruction::parse(&task.instruction))
    }

    fn context(p: &Policy, world: &World, frame: &Frame, instr: &Instruction) -> EpisodeContext {
        let noise = DetectorNoiseModel::none();
        p.prepare_episode(
            instr,
            MaskSource::FirstFrame {
                world,
                frame,
                noise: &noise,
            },
            9,
        )
        .unwrap()
    }

    #[test]
    fn context_and_chunks_are_deterministic() {
        let p = policy(Ablation::NONE);
        let (world, obs, frame, instr) = first_frame();
        let a = context(&p, &world, &frame, &instr);
        let b = context(&p, &world, &frame, &instr);
        assert_eq!(a, b);
        assert!(!a.disabled);
        assert!(a.plan.is_some());
        let c1 = p.rollout_step(&obs, &a).unwrap();
        let c2 = p.rollout_step(&obs, &a).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(c1.actions.len(), p.params.config.chunk);
        assert!(c1.actions.iter().all(|a| (0.0..=1.0).contains(&a[6])));
    }

    #[test]
    fn counters_track_preparation_and_queries() {
        let p = policy(Ablation::NONE);
        let (world, obs, frame, instr) = first_frame();
        let ctx = context(&p, &world, &frame, &instr);
        for _ in 0..3 {
            p.rollout_step(&obs, &ctx).unwrap();
        }
        let c = p.counters.snapshot();
        assert_eq!((c.prepare_episode, c.decompose), (1, 1));
        assert_eq!(
            (c.queries, c.image_encodes, c.text_encodes, c.depth_encodes),
            (3, 3, 3, 3)
        );

        let p = policy(Ablation::NO_DEPTH);
        let ctx = context(&p, &world, &frame, &instr);
        p.rollout_step(&obs, &ctx).unwrap();
        assert_eq!(p.counters.snapshot().depth_encodes, 0);
    }

    #[test]
    fn no_entities_disables_pooling() {
        let p = policy(Ablation::NONE);
        let (world, _, frame, _) = first_frame();
        let ctx = context(&p, &world, &frame, &Instruction::parse("wave hello"));
        assert!(ctx.entities.is_empty());
        assert!(ctx.disabled);
        assert!(ctx.keep.is_none());
        assert!(p
            .prepare_episode(&Instruction::parse("  "), MaskSource::Demo(&[]), 0)
            .is_err());
    }

    #[test]
    fn full_coverage_matches_disabled_pooling() {
        let p = policy(Ablation::NONE);
        let (world, obs, frame, instr) = first_frame();
        let mut full = context(&p, &world, &frame, &instr);
        full.keep = Some(vec![true; p.params.config.num_patches()]);
        full.disabled = false;
        let mut off = full.clone();
        off.keep = None;
        off.disabled = true;
        assert_eq!(
            p.rollout_step(&obs, &full).unwrap(),
            p.rollout_step(&obs, &off).unwrap()
        );
    }

    #[test]
    fn ablations_touch_only_their_stage() {
        let (world, _, frame, instr) = first_frame();
        let full = context(&policy(Ablation::NONE), &world, &frame, &instr);
        let no_cot = context(&policy(Ablation::NO_COT), &world, &frame, &instr);
        assert!(no_cot.plan.is_none());
        assert!(no_cot.tokens.ids.len() < full.tokens.ids.len());
        assert_eq!(no_cot.keep, full.keep);
        let no_roi = context(&policy(Ablation::NO_ROI), &world, &frame, &instr);
        assert!(no_roi.disabled && no_roi.keep.is_none());
        assert_eq!(no_roi.tokens, full.tokens);
    }
}
