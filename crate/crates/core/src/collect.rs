//! Offline dataset construction, storage and the collect / train / exploit
//! refinement loop.
//!
//! A dataset file is one JSON header line followed by one line per
//! transition:
//!
//! ```text
//! {"dataset_format":1,"world_hash":"..","embedder":{..},"proposer":{..},"seeds":[..],"episodes":E,"transitions":N}
//! {"seq":0,"sum":"<16 hex>","transition":{..}}
//! ```
//!
//! `sum` is the first 16 hex digits of the SHA-256 of the serialized
//! transition object, so a flipped byte is reported with its line number.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{run_episode, AgentError, BehaviorTag, EpisodeRecord, Policy, QScorer};
use crate::embed::{Embedder, EmbedderConfig};
use crate::env::{Action, NavWorld, ObsState, Task};
use crate::iql::{self, StepMetrics, TrainConfig, TrainError, ValueNets};
use crate::proposer::{CandidateSet, ProposerConfig};
use crate::scalar::Scalar;
use crate::seed;

pub const DATASET_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transition {
    pub episode: u64,
    pub run: u32,
    pub step: u32,
    pub state: ObsState,
    pub action: Action,
    pub reward: f64,
    pub next_state: ObsState,
    pub done: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub misgrounded: bool,
    pub candidates: CandidateSet,
    pub chosen: usize,
    pub behavior: BehaviorTag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub dataset_format: u32,
    pub world_hash: String,
    pub embedder: EmbedderConfig,
    pub proposer: ProposerConfig,
    pub seeds: Vec<u64>,
    pub episodes: u64,
    pub transitions: u64,
}

/// Per-episode view derived from the transition list.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeSummary {
    pub episode: u64,
    pub run: u32,
    pub task: String,
    pub first: usize,
    pub len: usize,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub transitions: Vec<Transition>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("unsupported dataset_format {found} (expected {DATASET_FORMAT})")]
    Version { found: u32 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("line {line}: checksum mismatch")]
    Hash { line: usize },
    #[error("line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("truncated dataset: header declares {expected} transitions, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("dataset was collected on world {dataset}, not {world}")]
    WorldMismatch { dataset: String, world: String },
}

#[derive(Debug, Error)]
pub enum CollectError {
    #[error("runs must be at least 1")]
    NoRuns,
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("training failed in cycle {cycle}: {source}")]
    Train { cycle: usize, source: TrainError },
}

fn checksum(json: &str) -> String {
    seed::sha256_hex(json.as_bytes())[..16].to_string()
}

impl Dataset {
    pub fn new(world: &NavWorld, embedder: &EmbedderConfig, proposer: &ProposerConfig) -> Self {
        Dataset {
            header: DatasetHeader {
                dataset_format: DATASET_FORMAT,
                world_hash: world.content_hash(),
                embedder: embedder.clone(),
                proposer: proposer.clone(),
                seeds: Vec::new(),
                episodes: 0,
                transitions: 0,
            },
            transitions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn episode_count(&self) -> u64 {
        self.header.episodes
    }

    pub fn next_run(&self) -> u32 {
        self.transitions.last().map_or(0, |t| t.run + 1)
    }

    /// Appends finished episodes as consecutive episode ids. Earlier
    /// transitions are never touched.
    pub fn append(&mut self, run: u32, episodes: &[EpisodeRecord]) {
        for ep in episodes {
            let id = self.header.episodes;
            for (i, s) in ep.steps.iter().enumerate() {
                self.transitions.push(Transition {
                    episode: id,
                    run,
                    step: s.state.step,
                    state: s.state.clone(),
                    action: s.action.clone(),
                    reward: s.reward,
                    next_state: ep.next_state(i).clone(),
                    done: s.done,
                    misgrounded: s.misgrounded,
                    candidates: s.candidates.clone(),
                    chosen: s.chosen,
                    behavior: ep.policy.clone(),
                });
            }
            self.header.episodes += 1;
        }
        self.header.transitions = self.transitions.len() as u64;
    }

    pub fn episodes(&self) -> Vec<EpisodeSummary> {
        let mut out: Vec<EpisodeSummary> = Vec::new();
        for (i, t) in self.transitions.iter().enumerate() {
            match out.last_mut() {
                Some(e) if e.episode == t.episode => {
                    e.len += 1;
                    e.success |= t.reward > 0.0;
                }
                _ => out.push(EpisodeSummary {
                    episode: t.episode,
                    run: t.run,
                    task: t.state.task.clone(),
                    first: i,
                    len: 1,
                    success: t.reward > 0.0,
                }),
            }
        }
        out
    }

    /// Fraction of episodes that reached a reward.
    pub fn success_rate(&self) -> f64 {
        let eps = self.episodes();
        if eps.is_empty() {
            return 0.0;
        }
        eps.iter().filter(|e| e.success).count() as f64 / eps.len() as f64
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", serde_json::to_string(&self.header).expect("header serializes"))?;
        for (seq, t) in self.transitions.iter().enumerate() {
            let body = serde_json::to_string(t).expect("transition serializes");
            writeln!(w, "{{\"seq\":{seq},\"sum\":\"{}\",\"transition\":{body}}}", checksum(&body))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let io = |source| DatasetError::Io { path: path.display().to_string(), source };
        let f = std::fs::File::create(path).map_err(io)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }

    /// Reads and validates a dataset. With `world`, also checks that the
    /// dataset was collected on that world.
    pub fn read_from(r: impl BufRead, world: Option<&NavWorld>) -> Result<Self, DatasetError> {
        let mut lines = r.lines();
        let first = match lines.next() {
            None => return Err(DatasetError::Header("empty file".into())),
            Some(l) => l.map_err(|e| DatasetError::Header(e.to_string()))?,
        };
        let raw: serde_json::Value = serde_json::from_str(&first).map_err(|e| DatasetError::Header(e.to_string()))?;
        let found = raw.get("dataset_format").and_then(|v| v.as_u64()).ok_or_else(|| DatasetError::Header("missing dataset_format".into()))?;
        if found != u64::from(DATASET_FORMAT) {
            return Err(DatasetError::Version { found: found as u32 });
        }
        let header: DatasetHeader = serde_json::from_value(raw).map_err(|e| DatasetError::Header(e.to_string()))?;
        if let Some(w) = world {
            let hash = w.content_hash();
            if hash != header.world_hash {
                return Err(DatasetError::WorldMismatch { dataset: header.world_hash, world: hash });
            }
        }

        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Line {
            seq: u64,
            sum: String,
            transition: Box<serde_json::value::RawValue>,
        }
        let mut transitions = Vec::new();
        for (i, l) in lines.enumerate() {
            let line = i + 2;
            let corrupt = |reason: String| DatasetError::Corrupt { line, reason };
            let l = l.map_err(|e| corrupt(e.to_string()))?;
            let parsed: Line = serde_json::from_str(&l).map_err(|e| corrupt(e.to_string()))?;
            if parsed.seq != transitions.len() as u64 {
                return Err(corrupt(format!("expected seq {}, found {}", transitions.len(), parsed.seq)));
            }
            if checksum(parsed.transition.get()) != parsed.sum {
                return Err(DatasetError::Hash { line });
            }
            let t: Transition = serde_json::from_str(parsed.transition.get()).map_err(|e| corrupt(e.to_string()))?;
            transitions.push(t);
        }
        let found = transitions.len() as u64;
        if found != header.transitions {
            return Err(DatasetError::Truncated { expected: header.transitions, found });
        }
        let ds = Dataset { header, transitions };
        let counted = ds.episodes().len() as u64;
        if counted != ds.header.episodes {
            return Err(DatasetError::Header(format!("header declares {} episodes, body has {counted}", ds.header.episodes)));
        }
        Ok(ds)
    }

    pub fn load(path: &Path, world: Option<&NavWorld>) -> Result<Self, DatasetError> {
        let f = std::fs::File::open(path).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
        Self::read_from(BufReader::new(f), world)
    }
}

/// Seed of the episode for `task` in `run`.
pub fn episode_seed(seed: u64, run: u32, task: &str) -> u64 {
    seed::derive(seed, &["episode", &run.to_string(), task])
}

/// Runs `f` on a pool of `workers` threads (1 means the calling thread).
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    if workers <= 1 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// One pass over `tasks` per run. Episodes come back ordered by
/// `(run, task order, step)`; with `shuffle`, every run visits the tasks in a
/// fresh seeded order.
pub fn collect_episodes(
    world: &NavWorld,
    tasks: &[Task],
    policy: Policy<'_>,
    proposer: &ProposerConfig,
    runs: std::ops::Range<u32>,
    seed: u64,
    shuffle: bool,
    workers: usize,
) -> Result<Vec<(u32, Vec<EpisodeRecord>)>, CollectError> {
    if runs.is_empty() {
        return Err(CollectError::NoRuns);
    }
    let mut jobs: Vec<(u32, &Task)> = Vec::new();
    for run in runs.clone() {
        let mut order: Vec<&Task> = tasks.iter().collect();
        if shuffle {
            order.shuffle(&mut seed::rng(seed::derive(seed, &["order", &run.to_string()])));
        }
        jobs.extend(order.into_iter().map(|t| (run, t)));
    }
    let episodes: Vec<(u32, EpisodeRecord)> = with_workers(workers, || {
        jobs.par_iter()
            .map(|&(run, task)| run_episode(world, task, policy, proposer, episode_seed(seed, run, &task.id)).map(|e| (run, e)))
            .collect::<Result<_, _>>()
    })?;
    let mut grouped: BTreeMap<u32, Vec<EpisodeRecord>> = BTreeMap::new();
    for (run, ep) in episodes {
        grouped.entry(run).or_default().push(ep);
    }
    Ok(grouped.into_iter().collect())
}

/// Collects `runs` passes over `tasks` into a fresh dataset.
pub fn collect_runs(
    world: &NavWorld,
    tasks: &[Task],
    policy: Policy<'_>,
    proposer: &ProposerConfig,
    embedder: &EmbedderConfig,
    runs: u32,
    seed: u64,
    workers: usize,
) -> Result<Dataset, CollectError> {
    let mut ds = Dataset::new(world, embedder, proposer);
    ds.header.seeds.push(seed);
    for (run, eps) in collect_episodes(world, tasks, policy, proposer, 0..runs, seed, false, workers)? {
        ds.append(run, &eps);
    }
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub initial_runs: u32,
    pub cycles: u32,
    pub runs_per_cycle: u32,
    pub epsilon: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { initial_runs: 5, cycles: 4, runs_per_cycle: 2, epsilon: 0.5 }
    }
}

impl Schedule {
    pub fn total_runs(&self) -> u32 {
        self.initial_runs + self.cycles * self.runs_per_cycle
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.initial_runs == 0 {
            return Err("initial_runs must be at least 1".into());
        }
        if self.cycles > 0 && self.runs_per_cycle == 0 {
            return Err("runs_per_cycle must be at least 1 when cycles > 0".into());
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(format!("epsilon {} outside [0, 1]", self.epsilon));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CycleSummary {
    /// 0 is the initial exploration phase.
    pub cycle: u32,
    pub runs_collected: u32,
    pub cumulative_runs: u32,
    pub episodes: u64,
    pub transitions: u64,
    /// Success rate of the episodes collected in this phase.
    pub collected_success: f64,
}

pub struct Refinement<T> {
    pub dataset: Dataset,
    /// `checkpoints[i]` was trained on the data available after phase `i`.
    pub checkpoints: Vec<ValueNets<T>>,
    pub metrics: Vec<Vec<StepMetrics>>,
    pub cycles: Vec<CycleSummary>,
}

/// Training config for checkpoint `i` of a refinement.
pub fn cycle_train_config(train: &TrainConfig, cycle: u32) -> TrainConfig {
    TrainConfig { seed: seed::derive(train.seed, &["cycle", &cycle.to_string()]), ..train.clone() }
}

/// Phase 0 collects `initial_runs` epsilon-greedy runs and trains checkpoint
/// 0. Cycle `c` collects `runs_per_cycle` greedy Best-of-Q runs with
/// checkpoint `c - 1`, appends them and trains checkpoint `c`. The result
/// has `cycles + 1` checkpoints.
#[allow(clippy::too_many_arguments)]
pub fn iterative_refinement<T: Scalar>(
    world: &NavWorld,
    tasks: &[Task],
    proposer: &ProposerConfig,
    embedder: &Embedder,
    schedule: &Schedule,
    train: &TrainConfig,
    seed: u64,
    workers: usize,
) -> Result<Refinement<T>, CollectError> {
    let mut ds = collect_runs(
        world,
        tasks,
        Policy::EpsGreedy(schedule.epsilon),
        proposer,
        embedder.config(),
        schedule.initial_runs,
        seed,
        workers,
    )?;
    let mut cycles = vec![CycleSummary {
        cycle: 0,
        runs_collected: schedule.initial_runs,
        cumulative_runs: schedule.initial_runs,
        episodes: ds.episode_count(),
        transitions: ds.len() as u64,
        collected_success: ds.success_rate(),
    }];
    let fit = |ds: &Dataset, cycle: u32| {
        iql::train::<T>(&ds.transitions, tasks, embedder, &cycle_train_config(train, cycle))
            .map_err(|source| CollectError::Train { cycle: cycle as usize, source })
    };
    let first = fit(&ds, 0)?;
    let mut checkpoints = vec![first.nets];
    let mut metrics = vec![first.metrics];

    for cycle in 1..=schedule.cycles {
        let start = ds.next_run();
        let runs = start..start + schedule.runs_per_cycle;
        let scorer = QScorer::new(checkpoints.last().expect("at least one"), embedder)?;
        let before = ds.episode_count();
        let mut wins = 0usize;
        for (run, eps) in collect_episodes(world, tasks, Policy::BestOfQ(&scorer), proposer, runs, seed, true, workers)? {
            wins += eps.iter().filter(|e| e.success).count();
            ds.append(run, &eps);
        }
        let added = ds.episode_count() - before;
        cycles.push(CycleSummary {
            cycle,
            runs_collected: schedule.runs_per_cycle,
            cumulative_runs: schedule.initial_runs + cycle * schedule.runs_per_cycle,
            episodes: ds.episode_count(),
            transitions: ds.len() as u64,
            collected_success: wins as f64 / added.max(1) as f64,
        });
        let out = fit(&ds, cycle)?;
        checkpoints.push(out.nets);
        metrics.push(out.metrics);
    }
    Ok(Refinement { dataset: ds, checkpoints, metrics, cycles })
}

/// One transition for every `(page, step)` reachable from each task's start
/// and every Markov action there, with the optimal actions repeated
/// `optimal_copies` times. Each `(page, step)` uses the first history that
/// reaches it, so this is only meaningful with history-blind embeddings.
pub fn tabular_complete(world: &NavWorld, optimal_copies: usize) -> Result<Vec<Transition>, crate::env::EnvError> {
    let mut out = Vec::new();
    for (episode, task) in world.tasks.iter().enumerate() {
        let dist = world.distances(task);
        let mut frontier = vec![world.reset(task)];
        let mut seen = std::collections::BTreeSet::new();
        while let Some(state) = frontier.pop() {
            if !seen.insert((state.page, state.step)) {
                continue;
            }
            let actions = world.markov_actions(task, state.page)?;
            let optimal = world.optimal_actions(task, &dist, state.page)?;
            let candidates = CandidateSet {
                actions: actions.clone(),
                provenance: vec![crate::proposer::Provenance::Plausible; actions.len()],
                short: false,
            };
            for (chosen, a) in actions.iter().enumerate() {
                let o = world.step(&state, a)?;
                let copies = if optimal.contains(a) { optimal_copies.max(1) } else { 1 };
                for _ in 0..copies {
                    out.push(Transition {
                        episode: episode as u64,
                        run: 0,
                        step: state.step,
                        state: state.clone(),
                        action: a.clone(),
                        reward: o.reward,
                        next_state: o.state.clone(),
                        done: o.done,
                        misgrounded: o.misgrounded,
                        candidates: candidates.clone(),
                        chosen,
                        behavior: BehaviorTag::Random,
                    });
                }
                if !o.done {
                    frontier.push(o.state);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_world, WorldSpec};

    fn small() -> (NavWorld, Dataset) {
        let w = generate_world(&WorldSpec { pages: 12, tasks: 4, horizon: 8, ..Default::default() }, 3).unwrap();
        let ds = collect_runs(&w, &w.tasks, Policy::EpsGreedy(0.5), &ProposerConfig::default(), &EmbedderConfig::default(), 2, 9, 1)
            .unwrap();
        (w, ds)
    }

    #[test]
    fn counts_and_bounds() {
        let (w, ds) = small();
        assert_eq!(ds.episode_count(), 8);
        assert!(ds.len() <= 8 * 8);
        let eps = ds.episodes();
        assert_eq!(eps.len(), 8);
        for t in &ds.transitions {
            assert!(t.reward == 0.0 || t.reward == 1.0);
            assert!(t.chosen < t.candidates.len());
            if t.done {
                assert!(t.reward == 1.0 || t.next_state.step == w.horizon);
            }
        }
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let (w, ds) = small();
        let bytes = ds.to_bytes();
        let back = Dataset::read_from(&bytes[..], Some(&w)).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
        let (_, again) = small();
        assert_eq!(again.to_bytes(), bytes);
    }

    #[test]
    fn workers_do_not_change_output() {
        let (w, ds) = small();
        let par = collect_runs(&w, &w.tasks, Policy::EpsGreedy(0.5), &ProposerConfig::default(), &EmbedderConfig::default(), 2, 9, 3)
            .unwrap();
        assert_eq!(par.to_bytes(), ds.to_bytes());
    }

    #[test]
    fn integrity_errors_are_distinct() {
        let (w, ds) = small();
        let text = String::from_utf8(ds.to_bytes()).unwrap();
        let lines: Vec<&str> = text.lines().collect();

        let flipped = text.replacen("\"reward\":0.0", "\"reward\":1.0", 1);
        match Dataset::read_from(flipped.as_bytes(), None) {
            Err(DatasetError::Hash { line }) => assert!(line >= 2),
            other => panic!("{other:?}"),
        }
        let mut broken = lines.clone();
        let bad = broken[3].replacen('{', "#", 1);
        broken[3] = &bad;
        assert!(matches!(Dataset::read_from(broken.join("\n").as_bytes(), None), Err(DatasetError::Corrupt { line: 4, .. })));

        let truncated = lines[..lines.len() - 2].join("\n");
        assert!(matches!(Dataset::read_from(truncated.as_bytes(), None), Err(DatasetError::Truncated { .. })));

        let version = text.replacen("\"dataset_format\":1", "\"dataset_format\":7", 1);
        assert!(matches!(Dataset::read_from(version.as_bytes(), None), Err(DatasetError::Version { found: 7 })));

        let other = generate_world(&WorldSpec { pages: 12, tasks: 4, horizon: 8, ..Default::default() }, 4).unwrap();
        assert!(matches!(Dataset::read_from(text.as_bytes(), Some(&other)), Err(DatasetError::WorldMismatch { .. })));
        assert!(Dataset::read_from(text.as_bytes(), Some(&w)).is_ok());
    }

    #[test]
    fn epsilon_half_picks_slot_zero_about_half_the_time() {
        let w = generate_world(&WorldSpec::default(), 5).unwrap();
        let ds = collect_runs(&w, &w.tasks, Policy::EpsGreedy(0.5), &ProposerConfig::default(), &EmbedderConfig::default(), 12, 1, 1)
            .unwrap();
        assert!(ds.len() >= 2000, "{}", ds.len());
        let zero = ds.transitions.iter().filter(|t| t.chosen == 0).count() as f64 / ds.len() as f64;
        assert!((zero - 0.5).abs() < 0.03, "{zero}");
    }

    #[test]
    fn schedule_arithmetic() {
        let s = Schedule::default();
        assert_eq!(s.total_runs(), 13);
        assert!(Schedule { initial_runs: 0, ..Default::default() }.validate().is_err());
        assert!(Schedule { epsilon: 1.2, ..Default::default() }.validate().is_err());
    }
}
