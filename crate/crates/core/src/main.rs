use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cavla::error::{Error, Result};
use cavla::harness::ablate::ablate;
use cavla::harness::bench::bench_latency;
use cavla::harness::checkpoint::{check_compatible, load_checkpoint};
use cavla::harness::eval::{
    evaluate_tasks, run_episode, suite_tasks, Agent, EvalOptions, ExpertController, PolicyController,
};
use cavla::harness::{generate_dataset, train, RunConfig};
use cavla::policy::Ablation;
use cavla::sim::task_by_id;

#[derive(Parser)]
#[command(
    name = "cavla",
    version,
    about = "Desk-scale vision-language-action policy with depth, plan tokens and ROI pooling"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run everything on one thread for bitwise reproducibility.
    #[arg(long, global = true)]
    single_thread: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Seen,
    Similar,
    Unseen,
}

impl Suite {
    fn name(self) -> &'static str {
        match self {
            Suite::Seen => "seen",
            Suite::Similar => "similar",
            Suite::Unseen => "unseen",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AgentKind {
    Policy,
    Expert,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Record expert demonstrations.
    GenData,
    /// Train a policy on a recorded dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ablate: Option<Ablation>,
    },
    /// Evaluate a checkpoint (or a reference controller) on a suite.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "seen")]
        suite: Suite,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, value_enum, default_value = "policy")]
        agent: AgentKind,
        /// Dump query frames of the first N trials per task as PPM.
        #[arg(long, default_value_t = 0)]
        dump: usize,
    },
    /// Train and evaluate the full model and each single-stage ablation.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Per-query latency with and without depth.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
    },
    /// Dump the frames of one rollout as PPM.
    Render {
        #[arg(long, default_value = "ball_basket")]
        task: String,
        /// Roll out this checkpoint instead of the scripted expert.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.single_thread |= common.single_thread;
    Ok(cfg)
}

fn out_dir(common: &Common, fallback: PathBuf) -> PathBuf {
    common.out.clone().unwrap_or(fallback)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    if cfg.single_thread {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.cmd {
        Command::GenData => {
            let out = out_dir(&cli.common, cfg.paths.data.clone());
            let m = generate_dataset(&cfg, &out)?;
            println!(
                "wrote {} episodes to {} ({} excluded)",
                m.episodes.len(),
                out.display(),
                m.excluded.len()
            );
        }
        Command::Train { data, ablate } => {
            if let Some(a) = ablate {
                cfg.ablation = a;
            }
            let data = data.unwrap_or_else(|| cfg.paths.data.clone());
            let out = out_dir(&cli.common, cfg.paths.runs.join(cfg.ablation.tag()));
            let o = train(&cfg, &data, &out)?;
            println!(
                "loss {:.4} -> {:.4}, converged by step {}, {:.1}s; checkpoint {}",
                o.first_loss,
                o.final_loss,
                o.convergence_step,
                o.wall_time_s,
                o.checkpoint.display()
            );
        }
        Command::Eval {
            checkpoint,
            suite,
            trials,
            agent,
            dump,
        } => {
            if let Some(t) = trials {
                cfg.eval.trials = t;
            }
            cfg.eval.dump_episodes = dump;
            let out = out_dir(&cli.common, cfg.paths.runs.join("eval"));
            let loaded = match (&checkpoint, agent) {
                (Some(dir), _) => {
                    let (policy, index) = load_checkpoint(dir)?;
                    if cli.common.config.is_some() {
                        check_compatible(&cfg.model, &index)?;
                    }
                    cfg.model = index.model.clone();
                    Some((policy, index.tasks))
                }
                (None, AgentKind::Policy) => {
                    return Err(Error::InvalidArgument(
                        "--checkpoint is required for the policy agent".into(),
                    ))
                }
                (None, _) => None,
            };
            let trained = loaded
                .as_ref()
                .map_or_else(|| cfg.data.tasks.clone(), |(_, t)| t.clone());
            let tasks = suite_tasks(suite.name(), &trained)?;
            let agent = match (agent, &loaded) {
                (AgentKind::Policy, Some((p, _))) => Agent::Policy(p),
                (AgentKind::Expert, _) => Agent::Expert,
                (AgentKind::Random, _) => Agent::Random,
                (AgentKind::Policy, None) => unreachable!("checked above"),
            };
            let mut opts = EvalOptions::from_config(&cfg, suite.name());
            opts.dump_dir = (dump > 0).then(|| out.join("frames"));
            let report = evaluate_tasks(agent, &tasks, &opts)?;
            let (m, _) = report.write(&out)?;
            for r in &report.metrics {
                println!(
                    "{:<22} {:>3}/{:<3} {:.3}",
                    r.task_id, r.successes, r.trials, r.success_rate
                );
            }
            println!("mean {:.3}; metrics in {}", report.mean_success(), m.display());
        }
        Command::Ablate { data } => {
            let data = data.unwrap_or_else(|| cfg.paths.data.clone());
            let out = out_dir(&cli.common, cfg.paths.runs.join("ablate"));
            let r = ablate(&cfg, &data, &out)?;
            println!("{:<10} {:>6} {:>6}", "ablation", "seen", "unseen");
            for row in &r.rows {
                println!("{:<10} {:>6.3} {:>6.3}", row.ablation, row.seen, row.unseen);
            }
            println!("full model unseen >= every ablation: {}", r.full_leads_unseen);
        }
        Command::Bench { checkpoint, steps } => {
            let (policy, index) = load_checkpoint(&checkpoint)?;
            let tasks = suite_tasks("seen", &index.tasks)?;
            let r = bench_latency(&policy, &tasks, steps, cfg.seed, cfg.eval.max_steps)?;
            let out = out_dir(&cli.common, cfg.paths.runs.join("bench"));
            write_json(&out.join("latency.json"), &r)?;
            println!(
                "depth on {:.2} ms ({:.1} Hz), off {:.2} ms ({:.1} Hz), ratio {:.3}; {} episodes, prepare calls {}/{}",
                r.median_ms_depth,
                r.hz_depth,
                r.median_ms_no_depth,
                r.hz_no_depth,
                r.ratio,
                r.episodes,
                r.prepare_calls_depth,
                r.prepare_calls_no_depth
            );
            if !r.prepared_once_per_episode() {
                return Err(Error::InvalidArgument(
                    "prepare_episode ran more than once per episode".into(),
                ));
            }
        }
        Command::Render { task, checkpoint } => {
            let spec = task_by_id(&task)?;
            let out = out_dir(&cli.common, cfg.paths.runs.join("render").join(&task));
            let s = cavla::harness::eval::eval_seed(cfg.seed, &spec.id, 0);
            let outcome = match &checkpoint {
                Some(dir) => {
                    let (policy, _) = load_checkpoint(dir)?;
                    let mut c = PolicyController::new(&policy, &spec, cfg.detector.clone());
                    run_episode(
                        &mut c,
                        &spec,
                        s,
                        cfg.eval.max_steps,
                        policy.params.config.wrist,
                        Some(&out),
                    )?
                }
                None => {
                    let mut c = RenderingExpert(ExpertController);
                    run_episode(&mut c, &spec, s, cfg.eval.max_steps, cfg.model.wrist, Some(&out))?
                }
            };
            println!(
                "{} after {} steps; frames in {}",
                if outcome.success { "success" } else { "failure" },
                outcome.steps,
                out.display()
            );
        }
    }
    Ok(())
}

/// The expert with observations switched on, so every step is rendered.
struct RenderingExpert(ExpertController);

impl cavla::harness::Controller for RenderingExpert {
    fn needs_observation(&self) -> bool {
        true
    }

    fn begin(
        &mut self,
        w: &cavla::sim::World,
        o: &cavla::sim::Observation,
        f: &cavla::sim::Frame,
        s: u64,
    ) -> Result<()> {
        self.0.begin(w, o, f, s)
    }

    fn act(&mut self, w: &cavla::sim::World, o: Option<&cavla::sim::Observation>) -> Result<Vec<cavla::sim::Action>> {
        self.0.act(w, o)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
