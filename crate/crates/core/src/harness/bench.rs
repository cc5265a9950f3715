//! Per-query latency with and without the depth branch.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::eval::eval_seed;
use crate::error::{Error, Result};
use crate::lang::Instruction;
use crate::policy::{Ablation, MaskSource, Policy};
use crate::roi::DetectorNoiseModel;
use crate::sim::{observe, CameraRig, TaskSpec, World};

/// Bench episodes draw from their own trial range.
pub const BENCH_TRIAL_OFFSET: u64 = 1 << 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub steps: usize,
    pub episodes: usize,
    pub median_ms_depth: f64,
    pub median_ms_no_depth: f64,
    /// Depth-on over depth-off median latency.
    pub ratio: f64,
    pub hz_depth: f64,
    pub hz_no_depth: f64,
    /// `prepare_episode` calls seen by each of the two policies.
    pub prepare_calls_depth: u64,
    pub prepare_calls_no_depth: u64,
    pub decompose_calls_depth: u64,
}

impl LatencyReport {
    /// Each policy prepared exactly one context per episode.
    pub fn prepared_once_per_episode(&self) -> bool {
        let e = self.episodes as u64;
        self.prepare_calls_depth == e && self.prepare_calls_no_depth == e
    }
}

pub fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Time `steps` queries of the same parameters with the depth branch on and
/// off. Both variants see the same observation at every query, alternating
/// which goes first; the depth-on variant drives the episode.
pub fn bench_latency(
    policy: &Policy,
    tasks: &[TaskSpec],
    steps: usize,
    run_seed: u64,
    max_steps: usize,
) -> Result<LatencyReport> {
    if tasks.is_empty() || steps == 0 {
        return Err(Error::InvalidArgument(
            "bench needs at least one task and one step".into(),
        ));
    }
    let variant = |no_depth| {
        let a = Ablation {
            no_depth,
            ..policy.ablation
        };
        Policy::new(policy.params.clone(), policy.vocab.clone(), a)
    };
    let on = variant(false)?;
    let off = variant(true)?;
    let noise = DetectorNoiseModel::none();
    let rig = CameraRig::new(policy.params.config.wrist);
    let execute = policy.params.config.execute;
    let (mut t_on, mut t_off) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
    let mut episodes = 0usize;

    while t_on.len() < steps {
        let task = &tasks[episodes % tasks.len()];
        let s = eval_seed(run_seed, &task.id, BENCH_TRIAL_OFFSET + episodes as u64);
        episodes += 1;
        let instr = Instruction::parse(&task.instruction);
        let mut world = World::reset(task, s)?;
        let (obs, frame) = observe(&world, &rig);
        let src = || MaskSource::FirstFrame {
            world: &world,
            frame: &frame,
            noise: &noise,
        };
        let ctx_on = on.prepare_episode(&instr, src(), s)?;
        let ctx_off = off.prepare_episode(&instr, src(), s)?;
        let mut obs = Some(obs);
        let mut done = 0usize;
        while done < max_steps && t_on.len() < steps {
            let o = match obs.take() {
                Some(o) => o,
                None => observe(&world, &rig).0,
            };
            let time = |p: &Policy, ctx| -> Result<(f64, _)> {
                let t0 = Instant::now();
                let chunk = p.rollout_step(&o, ctx)?;
                Ok((t0.elapsed().as_secs_f64() * 1e3, chunk))
            };
            let (chunk, a, b) = if t_on.len() % 2 == 0 {
                let (a, c) = time(&on, &ctx_on)?;
                let (b, _) = time(&off, &ctx_off)?;
                (c, a, b)
            } else {
                let (b, _) = time(&off, &ctx_off)?;
                let (a, c) = time(&on, &ctx_on)?;
                (c, a, b)
            };
            t_on.push(a);
            t_off.push(b);
            let mut finished = false;
            for act in chunk.actions.iter().take(execute) {
                world.step(act);
                done += 1;
                if world.check_success() || done >= max_steps {
                    finished = true;
                    break;
                }
            }
            if finished {
                break;
            }
        }
    }
    let m_on = median(&mut t_on);
    let m_off = median(&mut t_off);
    let c_on = on.counters.snapshot();
    let c_off = off.counters.snapshot();
    Ok(LatencyReport {
        steps,
        episodes,
        median_ms_depth: m_on,
        median_ms_no_depth: m_off,
        ratio: m_on / m_off,
        hz_depth: 1e3 / m_on,
        hz_no_depth: 1e3 / m_off,
        prepare_calls_depth: c_on.prepare_episode,
        prepare_calls_no_depth: c_off.prepare_episode,
        decompose_calls_depth: c_on.decompose,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::Vocabulary;
    use crate::policy::{ModelConfig, PolicyParams};
    use crate::sim::task_by_id;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }

    #[test]
    fn counts_one_preparation_per_episode() {
        let vocab = Vocabulary::build();
        let params = PolicyParams::new(&ModelConfig::default(), vocab.len()).unwrap();
        let policy = Policy::new(params, vocab, Ablation::NONE).unwrap();
        let tasks = vec![task_by_id("ball_basket").unwrap()];
        // An untrained policy rarely succeeds, so a short cap forces
        // several episodes.
        let r = bench_latency(&policy, &tasks, 12, 0, 16).unwrap();
        assert_eq!(r.episodes, 6);
        assert!(r.prepared_once_per_episode());
        assert_eq!(r.decompose_calls_depth, 6);
        assert!(r.median_ms_depth > 0.0 && r.median_ms_no_depth > 0.0);
    }
}
