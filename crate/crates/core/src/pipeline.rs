//! Config-driven stages shared by the command-line tool and the end-to-end
//! tests. Each stage is a thin wrapper over one module operation; the error
//! type sorts failures into the categories the CLI reports as exit codes.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::agent::{AgentError, EpisodeRecord, OracleScorer, Policy, QScorer};
use crate::collect::{self, CollectError, Dataset, DatasetError, Refinement};
use crate::config::{ConfigError, RunConfig};
use crate::embed::Embedder;
use crate::env::{generate_world, EnvError, NavWorld};
use crate::eval::{self, AgentKind, CostSummary, EvalError, EvalReport};
use crate::iql::{self, Checkpoint, CheckpointError, StepMetrics, TrainError};
use crate::{seed, Nets, Real};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl PipelineError {
    /// 3 config, 4 data, 5 numeric abort, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 3,
            PipelineError::Data(_) => 4,
            PipelineError::Numeric(_) => 5,
            PipelineError::Io { .. } => 1,
        }
    }

    fn config(section: &'static str, e: impl ToString) -> Self {
        PipelineError::Config(ConfigError::Invalid { section, message: e.to_string() })
    }
}

impl From<EnvError> for PipelineError {
    fn from(e: EnvError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<DatasetError> for PipelineError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { path, source } => PipelineError::Io { path, source },
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<CheckpointError> for PipelineError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { path, source } => PipelineError::Io { path, source },
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => PipelineError::Numeric(e.to_string()),
            TrainError::Config(m) => PipelineError::config("train", m),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<AgentError> for PipelineError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::NonFiniteScore { .. } => PipelineError::Numeric(e.to_string()),
            AgentError::Proposer(p) => PipelineError::config("proposer", p),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<CollectError> for PipelineError {
    fn from(e: CollectError) -> Self {
        match e {
            CollectError::Agent(a) => a.into(),
            CollectError::Train { cycle, source } => match PipelineError::from(source) {
                PipelineError::Numeric(m) => PipelineError::Numeric(format!("cycle {cycle}: {m}")),
                other => other,
            },
            CollectError::NoRuns => PipelineError::config("schedule", e),
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Agent(a) => a.into(),
            EvalError::UnknownPolicy(_) | EvalError::BadPrice(_) => PipelineError::config("cost", e),
            EvalError::Repeats { .. } => PipelineError::config("eval", e),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io { path: dir.display().to_string(), source })?;
    }
    std::fs::write(path, contents).map_err(|source| PipelineError::Io { path: path.display().to_string(), source })
}

pub fn read(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.display().to_string(), source })
}

pub fn embedder(cfg: &RunConfig) -> Result<Embedder, PipelineError> {
    Embedder::new(cfg.embedder.clone()).map_err(|e| PipelineError::config("embedder", e))
}

pub fn gen_world(cfg: &RunConfig) -> Result<NavWorld, PipelineError> {
    generate_world(&cfg.world, cfg.seed).map_err(|e| match e {
        EnvError::InvalidSpec(_) | EnvError::Degenerate(_) => PipelineError::config("world", e),
        other => other.into(),
    })
}

pub fn load_world(path: &Path) -> Result<NavWorld, PipelineError> {
    NavWorld::from_json(&read(path)?).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

pub fn collect_seed(cfg: &RunConfig) -> u64 {
    seed::derive(cfg.seed, &["collect"])
}

/// The initial epsilon-greedy collection of the schedule.
pub fn collect(cfg: &RunConfig, world: &NavWorld, workers: usize) -> Result<Dataset, PipelineError> {
    Ok(collect::collect_runs(
        world,
        &world.tasks,
        Policy::EpsGreedy(cfg.schedule.epsilon),
        &cfg.proposer,
        &cfg.embedder,
        cfg.schedule.initial_runs,
        collect_seed(cfg),
        workers,
    )?)
}

/// Trains on `dataset`; refuses datasets embedded under another config.
pub fn train(cfg: &RunConfig, world: &NavWorld, dataset: &Dataset) -> Result<(Nets, Vec<StepMetrics>), PipelineError> {
    let (want, have) = (cfg.embedder.fingerprint(), dataset.header.embedder.fingerprint());
    if want != have {
        return Err(PipelineError::Data(format!("dataset embedder {have} does not match config embedder {want}")));
    }
    if dataset.header.world_hash != world.content_hash() {
        return Err(PipelineError::Data("dataset was collected on a different world".into()));
    }
    let out = iql::train::<Real>(&dataset.transitions, &world.tasks, &embedder(cfg)?, &cfg.train)?;
    Ok((out.nets, out.metrics))
}

pub fn refine(cfg: &RunConfig, world: &NavWorld, workers: usize) -> Result<Refinement<Real>, PipelineError> {
    Ok(collect::iterative_refinement(
        world,
        &world.tasks,
        &cfg.proposer,
        &embedder(cfg)?,
        &cfg.schedule,
        &cfg.train,
        collect_seed(cfg),
        workers,
    )?)
}

pub fn checkpoint(cfg: &RunConfig, nets: &Nets, steps: u64) -> Checkpoint<Real> {
    Checkpoint::new(nets, &cfg.train, steps)
}

pub fn load_checkpoint(path: &Path) -> Result<Nets, PipelineError> {
    Ok(Checkpoint::<Real>::load(path)?.into_nets()?)
}

/// Agents the harness can evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgentChoice {
    BestOfQ,
    Prompting,
    Random,
    EpsGreedy,
    Oracle,
    NoisyOracle,
}

impl std::str::FromStr for AgentChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "best-of-q" => AgentChoice::BestOfQ,
            "prompting" => AgentChoice::Prompting,
            "random" => AgentChoice::Random,
            "eps-greedy" => AgentChoice::EpsGreedy,
            "oracle" => AgentChoice::Oracle,
            "noisy-oracle" => AgentChoice::NoisyOracle,
            other => return Err(format!("unknown agent `{other}`")),
        })
    }
}

impl AgentChoice {
    pub fn needs_checkpoint(self) -> bool {
        self == AgentChoice::BestOfQ
    }

    pub fn cost_kind(self, n: usize) -> AgentKind {
        match self {
            AgentChoice::BestOfQ | AgentChoice::Oracle | AgentChoice::NoisyOracle => AgentKind::BestOfQ { n },
            AgentChoice::Prompting => AgentKind::Prompting,
            AgentChoice::Random => AgentKind::Random,
            AgentChoice::EpsGreedy => AgentKind::EpsGreedy,
        }
    }
}

/// Runs the benchmark for one agent and attaches cost and config echo.
pub fn evaluate(
    cfg: &RunConfig,
    world: &NavWorld,
    agent: AgentChoice,
    nets: Option<&Nets>,
    workers: usize,
) -> Result<(EvalReport, Vec<EpisodeRecord>), PipelineError> {
    let emb = embedder(cfg)?;
    let oracle;
    let q;
    let policy = match agent {
        AgentChoice::BestOfQ => {
            let nets = nets.ok_or_else(|| PipelineError::Data("best-of-q needs a checkpoint".into()))?;
            q = QScorer::new(nets, &emb)?;
            Policy::BestOfQ(&q)
        }
        AgentChoice::Prompting => Policy::Prompting,
        AgentChoice::Random => Policy::Random,
        AgentChoice::EpsGreedy => Policy::EpsGreedy(cfg.eval.epsilon),
        AgentChoice::Oracle | AgentChoice::NoisyOracle => {
            oracle = OracleScorer::new(world, cfg.train.gamma)?;
            if agent == AgentChoice::Oracle {
                Policy::BestOfQ(&oracle)
            } else {
                Policy::NoisyOracle { scorer: &oracle, accuracy: cfg.eval.selector_accuracy }
            }
        }
    };
    let (mut report, episodes) = eval::evaluate(world, &world.tasks, policy, &cfg.proposer, cfg.eval.repeats, cfg.eval.seed, workers)?;
    let cost = cfg.cost.estimate(report.total_steps, agent.cost_kind(cfg.proposer.n_candidates))?;
    report.cost = Some(CostSummary::from(&cost));
    // The output directory is left out so reports from different
    // directories compare equal.
    let echo = RunConfig { output_dir: PathBuf::new(), ..cfg.clone() };
    report.config = Some(serde_json::to_value(&echo).expect("config serializes"));
    Ok((report, episodes))
}

pub fn episodes_jsonl(episodes: &[EpisodeRecord]) -> String {
    let mut out = String::new();
    for e in episodes {
        out.push_str(&e.to_json());
        out.push('\n');
    }
    out
}

pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeRecord>, PipelineError> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| PipelineError::Data(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}

pub fn read_report(path: &Path) -> Result<EvalReport, PipelineError> {
    serde_json::from_str(&read(path)?).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

/// Files written by [`run_full`].
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub world: PathBuf,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub report: PathBuf,
    pub episodes: PathBuf,
}

impl Artifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Artifacts {
            dir: dir.to_path_buf(),
            config: dir.join("config.resolved.toml"),
            world: dir.join("world.json"),
            dataset: dir.join("dataset.jsonl"),
            checkpoint: dir.join("checkpoint.json"),
            metrics: dir.join("metrics.csv"),
            report: dir.join("report.json"),
            episodes: dir.join("episodes.jsonl"),
        }
    }

    /// The byte-for-byte reproducible outputs.
    pub fn primary(&self) -> [&Path; 5] {
        [&self.world, &self.dataset, &self.checkpoint, &self.metrics, &self.report]
    }
}

/// gen-world, collect, train and a Best-of-Q evaluation into `dir`.
pub fn run_full(cfg: &RunConfig, dir: &Path, workers: usize) -> Result<Artifacts, PipelineError> {
    let a = Artifacts::in_dir(dir);
    write(&a.config, cfg.to_toml())?;
    let world = gen_world(cfg)?;
    write(&a.world, world.to_json())?;
    let data = collect(cfg, &world, workers)?;
    data.save(&a.dataset)?;
    let (nets, metrics) = train(cfg, &world, &data)?;
    checkpoint(cfg, &nets, cfg.train.total_steps).save(&a.checkpoint)?;
    write(&a.metrics, iql::metrics_csv(&metrics))?;
    let (report, episodes) = evaluate(cfg, &world, AgentChoice::BestOfQ, Some(&nets), workers)?;
    write(&a.report, report.to_json())?;
    write(&a.episodes, episodes_jsonl(&episodes))?;
    Ok(a)
}
