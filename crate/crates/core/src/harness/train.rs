//! Behavior-cloning loop over recorded chunk labels.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::save_checkpoint;
use super::config::RunConfig;
use super::dataset::{load_dataset, manifest_hash, EpisodeRecord};
use super::eval::{evaluate_tasks, write_csv, Agent, EvalOptions, TRAINING_EVAL_OFFSET};
use crate::autodiff::{Adam, Tape, Tensor};
use crate::error::{Error, Result};
use crate::lang::Vocabulary;
use crate::policy::{
    normalize_action, training_loss, BatchInputs, EpisodeContext, MaskSource, Policy, PolicyParams, ACTION_DIM,
};
use crate::roi::sample_disable;
use crate::seed;
use crate::sim::task_by_id;

pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const MANIFEST_HASH_FILE: &str = "data_manifest.sha256";
pub const LOSS_CSV: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRow {
    pub step: usize,
    /// Mean objective over the steps since the previous row.
    pub loss: f64,
    pub lr: f64,
    /// Held-out seen success rate, empty when no evaluation ran at this row.
    pub eval_success: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub first_loss: f64,
    pub final_loss: f64,
    pub log: Vec<LossRow>,
    /// First logged step whose interval loss is within 10% of the final one.
    pub convergence_step: usize,
    pub wall_time_s: f64,
}

/// Linear warmup to the peak rate, then cosine decay to the floor.
pub fn learning_rate(step: usize, cfg: &super::config::TrainConfig) -> f64 {
    let peak = cfg.adam.lr;
    if step < cfg.warmup_steps {
        return peak * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup_steps).max(1);
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    let floor = peak * cfg.min_lr_fraction;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

fn first_step_within(log: &[LossRow], final_loss: f64) -> usize {
    log.iter().find(|r| r.loss <= final_loss * 1.1).map_or(0, |r| r.step)
}

/// Host-side state the loop samples from.
struct Corpus {
    episodes: Vec<EpisodeRecord>,
    contexts: Vec<EpisodeContext>,
    /// `(episode, step)` for every labelled step.
    index: Vec<(usize, usize)>,
}

fn build_corpus(policy: &Policy, episodes: Vec<EpisodeRecord>) -> Result<Corpus> {
    let k = policy.params.config.chunk;
    let mut contexts = Vec::with_capacity(episodes.len());
    let mut index = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        if ep.meta.chunk != k {
            return Err(Error::Dataset(format!(
                "episode {}:{} has chunk {}, model expects {k}",
                ep.meta.task_id, ep.meta.seed, ep.meta.chunk
            )));
        }
        let masks = [vec![ep.roi.clone()]];
        contexts.push(policy.prepare_episode(&ep.instruction(), MaskSource::Demo(&masks), ep.meta.seed)?);
        index.extend((0..ep.len()).map(|t| (e, t)));
    }
    if index.is_empty() {
        return Err(Error::Dataset("dataset has no labelled steps".into()));
    }
    Ok(Corpus {
        episodes,
        contexts,
        index,
    })
}

fn make_batch(
    policy: &Policy,
    corpus: &Corpus,
    run_seed: u64,
    step: usize,
    batch: usize,
) -> Result<(BatchInputs, Vec<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(run_seed, seed::stream::BATCH, step as u64));
    let disable_prob = policy.params.config.pooling.disable_prob;
    let mut samples = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch * policy.params.config.chunk * ACTION_DIM);
    for i in 0..batch {
        let (e, t) = corpus.index[rng.random_range(0..corpus.index.len())];
        let g = (step * batch + i) as u64;
        let ep = &corpus.episodes[e];
        let ctx = &corpus.contexts[e];
        let pool = !ctx.disabled && !sample_disable(run_seed, g, disable_prob);
        let point_seed = seed::derive(run_seed, seed::stream::POINTS, g);
        samples.push(policy.sample_inputs(&ep.observation(t)?, ctx, pool, point_seed)?);
        for a in ep.label(t).chunks(ACTION_DIM) {
            targets.extend(normalize_action(a.try_into().expect("label rows are 7 wide")));
        }
    }
    Ok((BatchInputs::collate(&samples)?, targets))
}

/// Train a policy on the dataset in `data_dir`, writing the run to `out`.
pub fn train(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let (manifest, episodes) = load_dataset(data_dir)?;
    let data_hash = manifest_hash(data_dir)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let snap = out.join(CONFIG_SNAPSHOT);
    std::fs::write(&snap, cfg.to_json()).map_err(|e| Error::io(&snap, e))?;
    let hash_path = out.join(MANIFEST_HASH_FILE);
    std::fs::write(&hash_path, format!("{data_hash}\n")).map_err(|e| Error::io(&hash_path, e))?;

    let vocab: Vocabulary = manifest.vocabulary.clone();
    let params = PolicyParams::new(&cfg.model, vocab.len())?;
    let mut policy = Policy::new(params, vocab, cfg.ablation)?;
    let corpus = build_corpus(&policy, episodes)?;
    let eval_tasks = manifest
        .tasks
        .iter()
        .map(|t| task_by_id(t))
        .collect::<Result<Vec<_>>>()?;
    let mut eval_opts = EvalOptions::from_config(cfg, "seen");
    eval_opts.trials = cfg.train.eval_trials;
    eval_opts.trial_offset = TRAINING_EVAL_OFFSET;
    eval_opts.dump_episodes = 0;

    let mut adam = Adam::new(cfg.train.adam, &policy.params.store);
    let ckpt = out.join(CHECKPOINT_DIR);
    let use_depth = !cfg.ablation.no_depth;
    let (k, b) = (cfg.model.chunk, cfg.train.batch_size);
    let mut log = Vec::new();
    let (mut acc, mut acc_n) = (0.0f64, 0usize);
    let mut first_loss = f64::NAN;

    for step in 0..cfg.train.steps {
        let lr = learning_rate(step, &cfg.train);
        adam.set_lr(lr);
        let (batch, targets) = make_batch(&policy, &corpus, cfg.seed, step, b)?;
        let mut tape = Tape::<f32>::new();
        let bound = policy.params.store.bind(&mut tape);
        let out_vars = policy.params.forward(&mut tape, &bound, &batch, use_depth)?;
        let target = tape.constant(Tensor::new(vec![b, k, ACTION_DIM], targets)?);
        let loss_var = training_loss(
            &mut tape,
            out_vars.actions,
            target,
            &out_vars.tnet,
            cfg.model.penalty_weight,
        )?;
        let loss = tape.value(loss_var).data()[0] as f64;
        if !loss.is_finite() {
            return Err(diverged(
                &policy,
                &manifest.tasks,
                &ckpt,
                &data_hash,
                step,
                format!("loss is {loss}"),
            ));
        }
        let grads = tape.backward(loss_var)?;
        let mut g = policy.params.store.grads(&bound, &grads);
        clip_global_norm(&mut g, cfg.train.grad_clip);
        if let Err(e) = adam.step(&mut policy.params.store, &g) {
            return Err(diverged(
                &policy,
                &manifest.tasks,
                &ckpt,
                &data_hash,
                step,
                e.to_string(),
            ));
        }
        if step == 0 {
            first_loss = loss;
        }
        acc += loss;
        acc_n += 1;
        let last = step + 1 == cfg.train.steps;
        let eval_now =
            cfg.train.eval_every > 0 && cfg.train.eval_trials > 0 && ((step + 1) % cfg.train.eval_every == 0 || last);
        if (step + 1) % cfg.train.log_every.max(1) == 0 || last || eval_now {
            let eval_success = if eval_now {
                Some(evaluate_tasks(Agent::Policy(&policy), &eval_tasks, &eval_opts)?.mean_success())
            } else {
                None
            };
            let row = LossRow {
                step: step + 1,
                loss: acc / acc_n as f64,
                lr,
                eval_success,
            };
            log::info!(
                "step {} loss {:.5} lr {:.2e}{}",
                row.step,
                row.loss,
                lr,
                match eval_success {
                    Some(s) => format!(" held-out success {s:.3}"),
                    None => String::new(),
                }
            );
            log.push(row);
            acc = 0.0;
            acc_n = 0;
        }
    }
    write_csv(&out.join(LOSS_CSV), &log)?;
    save_checkpoint(&ckpt, &policy, &manifest.tasks, cfg.train.steps, &data_hash)?;
    let final_loss = log.last().map_or(first_loss, |r| r.loss);
    Ok(TrainOutcome {
        run_dir: out.to_path_buf(),
        checkpoint: ckpt,
        first_loss,
        final_loss,
        convergence_step: first_step_within(&log, final_loss),
        log,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Save the current (still finite) parameters and build the error.
fn diverged(policy: &Policy, tasks: &[String], ckpt: &Path, hash: &str, step: usize, detail: String) -> Error {
    let detail = match save_checkpoint(ckpt, policy, tasks, step, hash) {
        Ok(_) => format!("{detail}; last good parameters saved to {}", ckpt.display()),
        Err(e) => format!("{detail}; saving last good parameters failed: {e}"),
    };
    Error::Diverged { step, detail }
}
