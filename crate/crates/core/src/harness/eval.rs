//! Closed-loop evaluation of a controller on task suites.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::lang::Instruction;
use crate::policy::{EpisodeContext, MaskSource, Policy};
use crate::roi::DetectorNoiseModel;
use crate::seed;
use crate::sim::world::{MAX_ROTATION, MAX_TRANSLATION};
use crate::sim::{
    all_tasks, observe, scripted_expert, suite, Action, CameraRig, Frame, Observation, Split, TaskSpec, World,
};

/// Trial indices at or above this offset are used for evaluation during
/// training, so they never coincide with a final evaluation.
pub const TRAINING_EVAL_OFFSET: u64 = 1 << 24;

/// Something that maps the current state of an episode to actions.
pub trait Controller {
    /// Whether [`Controller::act`] needs a rendered observation.
    fn needs_observation(&self) -> bool;

    fn begin(&mut self, world: &World, obs: &Observation, frame: &Frame, seed: u64) -> Result<()>;

    /// Actions to apply before the next query.
    fn act(&mut self, world: &World, obs: Option<&Observation>) -> Result<Vec<Action>>;
}

pub struct PolicyController<'a> {
    policy: &'a Policy,
    noise: DetectorNoiseModel,
    instruction: Instruction,
    ctx: Option<EpisodeContext>,
}

impl<'a> PolicyController<'a> {
    pub fn new(policy: &'a Policy, task: &TaskSpec, noise: DetectorNoiseModel) -> Self {
        PolicyController {
            policy,
            noise,
            instruction: Instruction::parse(&task.instruction),
            ctx: None,
        }
    }
}

impl Controller for PolicyController<'_> {
    fn needs_observation(&self) -> bool {
        true
    }

    fn begin(&mut self, world: &World, _obs: &Observation, frame: &Frame, seed: u64) -> Result<()> {
        let source = MaskSource::FirstFrame {
            world,
            frame,
            noise: &self.noise,
        };
        self.ctx = Some(self.policy.prepare_episode(&self.instruction, source, seed)?);
        Ok(())
    }

    fn act(&mut self, _world: &World, obs: Option<&Observation>) -> Result<Vec<Action>> {
        let ctx = self
            .ctx
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("act called before begin".into()))?;
        let obs = obs.ok_or_else(|| Error::InvalidArgument("policy needs an observation".into()))?;
        let mut chunk = self.policy.rollout_step(obs, ctx)?.actions;
        chunk.truncate(self.policy.params.config.execute);
        Ok(chunk)
    }
}

/// The privileged scripted expert, one action per query.
pub struct ExpertController;

impl Controller for ExpertController {
    fn needs_observation(&self) -> bool {
        false
    }

    fn begin(&mut self, _: &World, _: &Observation, _: &Frame, _: u64) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, world: &World, _: Option<&Observation>) -> Result<Vec<Action>> {
        Ok(vec![scripted_expert(world)])
    }
}

/// Uniform random actions over the full command range.
pub struct RandomController {
    rng: ChaCha8Rng,
}

impl Default for RandomController {
    fn default() -> Self {
        RandomController {
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl Controller for RandomController {
    fn needs_observation(&self) -> bool {
        false
    }

    fn begin(&mut self, _: &World, _: &Observation, _: &Frame, seed: u64) -> Result<()> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(())
    }

    fn act(&mut self, _: &World, _: Option<&Observation>) -> Result<Vec<Action>> {
        let mut a = [0f32; 7];
        for (i, v) in a.iter_mut().enumerate() {
            *v = match i {
                0..=2 => self.rng.random_range(-1.0..=1.0) * MAX_TRANSLATION as f32,
                3..=5 => self.rng.random_range(-1.0..=1.0) * MAX_ROTATION as f32,
                _ => self.rng.random_range(0.0..=1.0),
            };
        }
        Ok(vec![a])
    }
}

/// Which controller an evaluation runs.
#[derive(Clone, Copy)]
pub enum Agent<'a> {
    Policy(&'a Policy),
    Expert,
    Random,
}

impl Agent<'_> {
    pub fn tag(&self) -> String {
        match self {
            Agent::Policy(p) => p.ablation.tag(),
            Agent::Expert => "expert".into(),
            Agent::Random => "random".into(),
        }
    }

    fn controller(&self, task: &TaskSpec, noise: &DetectorNoiseModel) -> Box<dyn Controller + '_> {
        match *self {
            Agent::Policy(p) => Box::new(PolicyController::new(p, task, noise.clone())),
            Agent::Expert => Box::new(ExpertController),
            Agent::Random => Box::new(RandomController::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub steps: usize,
    pub queries: usize,
}

/// One rollout. The scene is rendered only when the controller queries.
/// Frames at query times go to `dump` as PPM when given.
pub fn run_episode(
    ctrl: &mut dyn Controller,
    task: &TaskSpec,
    episode_seed: u64,
    max_steps: usize,
    wrist: bool,
    dump: Option<&Path>,
) -> Result<EpisodeOutcome> {
    let rig = CameraRig::new(wrist);
    let mut world = World::reset(task, episode_seed)?;
    let (first, frame) = observe(&world, &rig);
    ctrl.begin(&world, &first, &frame, episode_seed)?;
    if let Some(dir) = dump {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut pending = Some(first);
    let (mut steps, mut queries) = (0, 0);
    while steps < max_steps {
        let obs = if ctrl.needs_observation() {
            Some(match pending.take() {
                Some(o) => o,
                None => observe(&world, &rig).0,
            })
        } else {
            None
        };
        if let (Some(dir), Some(o)) = (dump, &obs) {
            o.rgb.write_ppm(&dir.join(format!("step_{steps:04}.ppm")))?;
        }
        let actions = ctrl.act(&world, obs.as_ref())?;
        queries += 1;
        if actions.is_empty() {
            return Err(Error::InvalidArgument("controller returned no actions".into()));
        }
        for a in &actions {
            world.step(a);
            steps += 1;
            if world.check_success() {
                return Ok(EpisodeOutcome {
                    success: true,
                    steps,
                    queries,
                });
            }
            if steps >= max_steps {
                break;
            }
        }
    }
    Ok(EpisodeOutcome {
        success: false,
        steps,
        queries,
    })
}

/// Seed of evaluation trial `trial` on `task`.
pub fn eval_seed(run_seed: u64, task_id: &str, trial: u64) -> u64 {
    let idx = all_tasks().iter().position(|t| t.id == task_id).unwrap_or(usize::MAX) as u64;
    seed::derive(run_seed, seed::stream::EVAL_EPISODE, (idx << 32) | trial)
}

/// Deterministic per-task result. Timing lives in [`TimingRow`] so that
/// the metrics file is reproducible bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub suite: String,
    pub task_id: String,
    pub split: String,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub ablation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub suite: String,
    pub task_id: String,
    pub ablation: String,
    pub wall_time_s: f64,
    pub steps_per_sec: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub metrics: Vec<MetricsRow>,
    pub timing: Vec<TimingRow>,
}

impl SuiteReport {
    pub fn mean_success(&self) -> f64 {
        let (s, t) = self
            .metrics
            .iter()
            .fold((0, 0), |(s, t), r| (s + r.successes, t + r.trials));
        if t == 0 {
            0.0
        } else {
            s as f64 / t as f64
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = dir.join("metrics.csv");
        write_csv(&m, &self.metrics)?;
        let t = dir.join("timing.csv");
        write_csv(&t, &self.timing)?;
        Ok((m, t))
    }
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Options shared by every task of an evaluation.
#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub suite: String,
    pub trials: usize,
    pub max_steps: usize,
    pub run_seed: u64,
    /// Added to every trial index.
    pub trial_offset: u64,
    pub wrist: bool,
    pub noise: DetectorNoiseModel,
    pub dump_dir: Option<PathBuf>,
    pub dump_episodes: usize,
}

impl EvalOptions {
    pub fn from_config(cfg: &RunConfig, suite: &str) -> Self {
        EvalOptions {
            suite: suite.to_string(),
            trials: cfg.eval.trials,
            max_steps: cfg.eval.max_steps,
            run_seed: cfg.seed,
            trial_offset: 0,
            wrist: cfg.model.wrist,
            noise: cfg.detector.clone(),
            dump_dir: None,
            dump_episodes: cfg.eval.dump_episodes,
        }
    }
}

/// Evaluate `agent` on each task; trials run in parallel on the rayon pool.
pub fn evaluate_tasks(agent: Agent<'_>, tasks: &[TaskSpec], opts: &EvalOptions) -> Result<SuiteReport> {
    let mut metrics = Vec::with_capacity(tasks.len());
    let mut timing = Vec::with_capacity(tasks.len());
    for task in tasks {
        let start = Instant::now();
        let outcomes: Vec<EpisodeOutcome> = (0..opts.trials)
            .into_par_iter()
            .map(|trial| {
                let s = eval_seed(opts.run_seed, &task.id, opts.trial_offset + trial as u64);
                let dump = match &opts.dump_dir {
                    Some(d) if trial < opts.dump_episodes => Some(d.join(&task.id).join(format!("trial_{trial:03}"))),
                    _ => None,
                };
                let mut ctrl = agent.controller(task, &opts.noise);
                run_episode(ctrl.as_mut(), task, s, opts.max_steps, opts.wrist, dump.as_deref())
            })
            .collect::<Result<_>>()?;
        let wall = start.elapsed().as_secs_f64();
        let successes = outcomes.iter().filter(|o| o.success).count();
        let steps: usize = outcomes.iter().map(|o| o.steps).sum();
        metrics.push(MetricsRow {
            suite: opts.suite.clone(),
            task_id: task.id.clone(),
            split: task.split.as_str().to_string(),
            trials: opts.trials,
            successes,
            success_rate: successes as f64 / opts.trials.max(1) as f64,
            ablation: agent.tag(),
        });
        timing.push(TimingRow {
            suite: opts.suite.clone(),
            task_id: task.id.clone(),
            ablation: agent.tag(),
            wall_time_s: wall,
            steps_per_sec: if wall > 0.0 { steps as f64 / wall } else { 0.0 },
        });
        log::info!(
            "{} {}: {}/{} ({})",
            opts.suite,
            task.id,
            successes,
            opts.trials,
            agent.tag()
        );
    }
    Ok(SuiteReport { metrics, timing })
}

/// Tasks of a named suite. `seen` is restricted to the tasks the model was
/// trained on; `similar` and `unseen` are the full splits.
pub fn suite_tasks(name: &str, trained: &[String]) -> Result<Vec<TaskSpec>> {
    let split = match name {
        "seen" => Split::Seen,
        "similar" => Split::Similar,
        "unseen" => Split::Unseen,
        other => return Err(Error::InvalidArgument(format!("unknown suite {other:?}"))),
    };
    let mut tasks = suite(split);
    if split == Split::Seen {
        tasks.retain(|t| trained.contains(&t.id));
        if tasks.is_empty() {
            return Err(Error::InvalidArgument("no trained task is in the seen split".into()));
        }
    }
    Ok(tasks)
}
