use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bestofq::agent::QScorer;
use bestofq::config::RunConfig;
use bestofq::eval;
use bestofq::pipeline::{self as pl, AgentChoice, PipelineError};
use bestofq::Nets;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bestofq", version, about = "Best-of-N reranking with offline-trained Q-functions on synthetic navigation worlds")]
struct Cli {
    /// Maximum worker threads for collection and evaluation. Output does
    /// not depend on this value.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a world from the [world] section of a config.
    GenWorld {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect epsilon-greedy (or another behavior policy's) episodes.
    Collect {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// eps-greedy, random or prompting.
        #[arg(long, default_value = "eps-greedy")]
        policy: String,
        /// Defaults to the schedule's initial runs.
        #[arg(long)]
        runs: Option<u32>,
    },
    /// Train Q and V networks on a dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Run the collect / train / exploit schedule.
    Refine {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        world: PathBuf,
        /// Defaults to the config's output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Benchmark one agent.
    Eval {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        world: PathBuf,
        /// best-of-q, prompting, random, eps-greedy, oracle or noisy-oracle.
        #[arg(long, default_value = "best-of-q")]
        agent: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        episodes: Option<PathBuf>,
        /// Per-task outcome table.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Success and steps for every (trained N, inference N) pair.
    AblateN {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        world: PathBuf,
        /// `N_TRAIN=PATH`, repeatable.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<String>,
        /// Inference-time N values; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        n: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Golden-action containment and selection breakdown.
    FailureModes {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "best-of-q")]
        agent: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean of per-task outcome variances and pass@k of a report.
    Variance {
        #[arg(long)]
        report: PathBuf,
    },
    /// Cost of a report's run under the config's price table.
    Cost {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "best-of-q")]
        agent: String,
    },
    /// Per-step value trace of one recorded episode.
    Trace {
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig, PipelineError> {
    let mut cfg = RunConfig::load(&arg.config)?;
    if let Some(s) = arg.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Writes the resolved config next to a stage's output.
fn echo_config(cfg: &RunConfig, output: &Path) -> Result<(), PipelineError> {
    let dir = output.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    pl::write(&dir.join("config.resolved.toml"), cfg.to_toml())
}

fn parse_agent(s: &str) -> Result<AgentChoice, PipelineError> {
    s.parse().map_err(|e: String| PipelineError::Config(bestofq::config::ConfigError::Invalid { section: "agent", message: e }))
}

fn checkpoint_for(agent: AgentChoice, path: Option<&Path>) -> Result<Option<Nets>, PipelineError> {
    match path {
        Some(p) => pl::load_checkpoint(p).map(Some),
        None if agent.needs_checkpoint() => Err(PipelineError::Data("--checkpoint is required for best-of-q".into())),
        None => Ok(None),
    }
}

fn output(path: Option<&Path>, text: &str) -> Result<(), PipelineError> {
    match path {
        Some(p) => pl::write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let workers = cli.workers.max(1);
    match cli.command {
        Command::GenWorld { spec, seed, out } => {
            let mut cfg = RunConfig::load(&spec)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let world = pl::gen_world(&cfg)?;
            pl::write(&out, world.to_json())?;
            echo_config(&cfg, &out)?;
            let solvable = world.tasks.iter().filter(|t| t.solvable).count();
            eprintln!("world {} : {} pages, {} tasks ({} solvable)", world.content_hash(), world.pages.len(), world.tasks.len(), solvable);
        }
        Command::Collect { cfg, world, out, policy, runs } => {
            let mut cfg = load_config(&cfg)?;
            let world = pl::load_world(&world)?;
            if let Some(r) = runs {
                cfg.schedule.initial_runs = r;
            }
            let policy = match parse_agent(&policy)? {
                AgentChoice::EpsGreedy => bestofq::agent::Policy::EpsGreedy(cfg.schedule.epsilon),
                AgentChoice::Random => bestofq::agent::Policy::Random,
                AgentChoice::Prompting => bestofq::agent::Policy::Prompting,
                other => return Err(PipelineError::Data(format!("{other:?} cannot be a collection policy here; use refine"))),
            };
            let ds = bestofq::collect::collect_runs(
                &world,
                &world.tasks,
                policy,
                &cfg.proposer,
                &cfg.embedder,
                cfg.schedule.initial_runs,
                pl::collect_seed(&cfg),
                workers,
            )
            .map_err(PipelineError::from)?;
            pl::write(&out, ds.to_bytes())?;
            echo_config(&cfg, &out)?;
            eprintln!("{} episodes, {} transitions, success rate {:.3}", ds.episode_count(), ds.len(), ds.success_rate());
        }
        Command::Train { cfg, world, data, out, metrics } => {
            let cfg = load_config(&cfg)?;
            let world = pl::load_world(&world)?;
            let ds = bestofq::collect::Dataset::load(&data, Some(&world))?;
            let (nets, m) = pl::train(&cfg, &world, &ds)?;
            pl::write(&out, pl::checkpoint(&cfg, &nets, cfg.train.total_steps).to_json())?;
            if let Some(p) = metrics {
                pl::write(&p, bestofq::iql::metrics_csv(&m))?;
            }
            echo_config(&cfg, &out)?;
            if let Some(last) = m.last() {
                eprintln!("step {} v_loss {:.5} q_loss {:.5} residual {:.5}", last.step, last.v_loss, last.q_loss, last.bellman_residual);
            }
        }
        Command::Refine { cfg, world, out_dir } => {
            let cfg = load_config(&cfg)?;
            let world = pl::load_world(&world)?;
            let dir = out_dir.unwrap_or_else(|| cfg.output_dir.clone());
            let r = pl::refine(&cfg, &world, workers)?;
            pl::write(&dir.join("dataset.jsonl"), r.dataset.to_bytes())?;
            let mut cycles = String::from("cycle,runs_collected,cumulative_runs,episodes,transitions,collected_success\n");
            for (i, (nets, c)) in r.checkpoints.iter().zip(&r.cycles).enumerate() {
                pl::write(&dir.join(format!("checkpoint_{i}.json")), pl::checkpoint(&cfg, nets, cfg.train.total_steps).to_json())?;
                pl::write(&dir.join(format!("metrics_{i}.csv")), bestofq::iql::metrics_csv(&r.metrics[i]))?;
                cycles += &format!("{},{},{},{},{},{}\n", c.cycle, c.runs_collected, c.cumulative_runs, c.episodes, c.transitions, c.collected_success);
            }
            pl::write(&dir.join("cycles.csv"), cycles)?;
            let emb = pl::embedder(&cfg)?;
            let curve = eval::sample_efficiency_curve(&world, &world.tasks, &r, &emb, &cfg.proposer, cfg.eval.repeats, cfg.eval.seed, workers)?;
            pl::write(&dir.join("sample_efficiency.csv"), curve.to_csv())?;
            pl::write(&dir.join("config.resolved.toml"), cfg.to_toml())?;
            eprintln!("{} episodes over {} checkpoints", r.dataset.episode_count(), r.checkpoints.len());
        }
        Command::Eval { cfg, world, agent, checkpoint, out, episodes, csv } => {
            let cfg = load_config(&cfg)?;
            let world = pl::load_world(&world)?;
            let agent = parse_agent(&agent)?;
            let nets = checkpoint_for(agent, checkpoint.as_deref())?;
            let (report, eps) = pl::evaluate(&cfg, &world, agent, nets.as_ref(), workers)?;
            pl::write(&out, report.to_json())?;
            if let Some(p) = episodes {
                pl::write(&p, pl::episodes_jsonl(&eps))?;
            }
            if let Some(p) = csv {
                pl::write(&p, report.outcomes_csv())?;
            }
            echo_config(&cfg, &out)?;
            let steps = report.avg_steps_success.map_or("-".to_string(), |s| format!("{s:.2}"));
            eprintln!("{}: success {:.3} ± {:.3}, avg steps for success {steps}", report.agent, report.success_rate, report.success_se);
        }
        Command::AblateN { cfg, world, checkpoints, n, out } => {
            let cfg = load_config(&cfg)?;
            let world = pl::load_world(&world)?;
            let mut loaded = Vec::new();
            for spec in &checkpoints {
                let (n_train, path) = spec
                    .split_once('=')
                    .and_then(|(a, b)| a.parse::<usize>().ok().map(|a| (a, b)))
                    .ok_or_else(|| PipelineError::Data(format!("expected N_TRAIN=PATH, got `{spec}`")))?;
                loaded.push((n_train, pl::load_checkpoint(Path::new(path))?));
            }
            let refs: Vec<(usize, &Nets)> = loaded.iter().map(|(n, c)| (*n, c)).collect();
            let n_infer = if n.is_empty() { cfg.eval.n_infer.clone() } else { n };
            let emb = pl::embedder(&cfg)?;
            let cells =
                eval::ablate_n(&world, &world.tasks, &refs, &n_infer, &emb, &cfg.proposer, cfg.eval.repeats, cfg.eval.seed, workers)?;
            pl::write(&out, eval::ablation_csv(&cells))?;
            echo_config(&cfg, &out)?;
        }
        Command::FailureModes { cfg, world, checkpoint, agent, out } => {
            let cfg = load_config(&cfg)?;
            let world = pl::load_world(&world)?;
            let agent = parse_agent(&agent)?;
            let nets = checkpoint_for(agent, checkpoint.as_deref())?;
            if let Some(n) = &nets {
                // Fail early with a data error rather than mid-run.
                QScorer::new(n, &pl::embedder(&cfg)?)?;
            }
            let (_, eps) = pl::evaluate(&cfg, &world, agent, nets.as_ref(), workers)?;
            let fb = eval::failure_breakdown(&world, &eps)?;
            pl::write(&out, fb.to_csv())?;
            echo_config(&cfg, &out)?;
            eprintln!(
                "not proposed {:.3}, proposed and selected {:.3}, proposed not selected {:.3}",
                fb.not_proposed, fb.proposed_selected, fb.proposed_not_selected
            );
        }
        Command::Variance { report } => {
            let r = pl::read_report(&report)?;
            let v = eval::task_variance(&r.outcomes)?;
            let mut text = format!("mean_task_variance,{v}\n");
            for k in 1..=r.repeats {
                text += &format!("pass@{k},{}\n", eval::pass_at_k(&r.outcomes, k)?);
            }
            print!("{text}");
        }
        Command::Cost { cfg, report, agent } => {
            let cfg = load_config(&cfg)?;
            let r = pl::read_report(&report)?;
            let kind = parse_agent(&agent)?.cost_kind(cfg.proposer.n_candidates);
            print!("{}", cfg.cost.estimate(r.total_steps, kind)?.to_csv());
        }
        Command::Trace { episodes, index, out } => {
            let eps = pl::read_episodes(&episodes)?;
            let ep = eps.get(index).ok_or_else(|| PipelineError::Data(format!("no episode {index} in {}", episodes.display())))?;
            output(out.as_deref(), &eval::trace_values(ep)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
