//! Inference-time policies and episode rollout.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::Embedder;
use crate::env::{Action, EnvError, NavWorld, ObsState, Task};
use crate::iql::ValueNets;
use crate::nn::NnError;
use crate::oracle::{self, OracleState, TabularValues};
use crate::proposer::{self, CandidateSet, ProposerConfig, ProposerError};
use crate::scalar::Scalar;
use crate::seed;

pub const EPISODE_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("embedder fingerprint mismatch: networks expect {nets}, scorer was given {embedder}")]
    EmbedderMismatch { nets: String, embedder: String },
    #[error("candidate {index} ({action}) has non-finite score {score}")]
    NonFiniteScore { index: usize, action: String, score: f64 },
    #[error("no candidates to choose from")]
    Empty,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Proposer(#[from] ProposerError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Assigns a value to each candidate at a state.
pub trait Scorer: Sync {
    fn score(&self, state: &ObsState, task: &Task, candidates: &[Action]) -> Result<Vec<f64>, AgentError>;

    /// State value for trace output, when the scorer has one.
    fn value(&self, _state: &ObsState, _task: &Task) -> Result<Option<f64>, AgentError> {
        Ok(None)
    }

    /// Identifier recorded in behavior tags.
    fn id(&self) -> String;
}

/// Learned `Q_theta` evaluated in eval mode.
pub struct QScorer<'a, T> {
    nets: &'a ValueNets<T>,
    embedder: &'a Embedder,
}

impl<'a, T: Scalar> QScorer<'a, T> {
    pub fn new(nets: &'a ValueNets<T>, embedder: &'a Embedder) -> Result<Self, AgentError> {
        let (n, e) = (nets.embedder_fingerprint(), embedder.fingerprint());
        if n != e {
            return Err(AgentError::EmbedderMismatch { nets: n, embedder: e });
        }
        Ok(QScorer { nets, embedder })
    }
}

fn stack<T: Scalar>(rows: usize, parts: &[&[f64]], repeat: &[bool], per_row: &[Vec<f64>]) -> Array2<T> {
    // Each row is the concatenation of `parts`, except slots flagged in
    // `repeat` which take the row's own vector from `per_row`.
    let mut data = Vec::new();
    for r in 0..rows {
        for (p, &rep) in parts.iter().zip(repeat) {
            let src: &[f64] = if rep { per_row.get(r).map_or(*p, Vec::as_slice) } else { p };
            data.extend(src.iter().map(|&x| T::of(x)));
        }
    }
    let width = data.len() / rows.max(1);
    Array2::from_shape_vec((rows, width), data).expect("consistent widths")
}

impl<T: Scalar> Scorer for QScorer<'_, T> {
    fn score(&self, state: &ObsState, task: &Task, candidates: &[Action]) -> Result<Vec<f64>, AgentError> {
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let s = self.embedder.embed_state(state);
        let t = self.embedder.embed_task(task);
        let acts: Vec<Vec<f64>> = candidates.iter().map(|a| self.embedder.embed_action(a)).collect();
        let x = stack::<T>(candidates.len(), &[&s, &[], &t], &[false, true, false], &acts);
        Ok(self.nets.q_batch(&x)?.iter().map(|q| q.as_f64()).collect())
    }

    fn value(&self, state: &ObsState, task: &Task) -> Result<Option<f64>, AgentError> {
        let s = self.embedder.embed_state(state);
        let t = self.embedder.embed_task(task);
        let x = stack::<T>(1, &[&s, &t], &[false, false], &[]);
        Ok(Some(self.nets.v_batch(&x)?[0].as_f64()))
    }

    fn id(&self) -> String {
        self.nets.q.param_hash()[..16].to_string()
    }
}

/// Exact `Q*` from value iteration over `(page, remaining budget)`.
pub struct OracleScorer {
    tables: BTreeMap<String, TabularValues<f64>>,
    horizon: u32,
    gamma: f64,
}

impl OracleScorer {
    pub fn new(world: &NavWorld, gamma: f64) -> Result<Self, EnvError> {
        let mut tables = BTreeMap::new();
        for task in &world.tasks {
            tables.insert(task.id.clone(), oracle::value_iteration(world, task, gamma, 1e-12)?);
        }
        Ok(OracleScorer { tables, horizon: world.horizon, gamma })
    }

    fn key(&self, state: &ObsState) -> OracleState {
        OracleState::new(state.page, self.horizon.saturating_sub(state.step))
    }
}

impl Scorer for OracleScorer {
    fn score(&self, state: &ObsState, task: &Task, candidates: &[Action]) -> Result<Vec<f64>, AgentError> {
        let table = self.tables.get(&task.id).ok_or_else(|| EnvError::UnknownTask(task.id.clone()))?;
        let s = self.key(state);
        // Actions outside the Markov action set (GoBack) get no value.
        Ok(candidates.iter().map(|a| table.q_value(s, a).unwrap_or(0.0)).collect())
    }

    fn value(&self, state: &ObsState, task: &Task) -> Result<Option<f64>, AgentError> {
        let table = self.tables.get(&task.id).ok_or_else(|| EnvError::UnknownTask(task.id.clone()))?;
        Ok(Some(table.value(self.key(state))))
    }

    fn id(&self) -> String {
        format!("oracle-g{}", self.gamma)
    }
}

/// Argmax with ties going to the lowest index.
pub fn best_of_q_select(scores: &[f64]) -> Result<usize, AgentError> {
    let mut best: Option<(usize, f64)> = None;
    for (index, &score) in scores.iter().enumerate() {
        if !score.is_finite() {
            return Err(AgentError::NonFiniteScore { index, action: String::new(), score });
        }
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((index, score));
        }
    }
    best.map(|(i, _)| i).ok_or(AgentError::Empty)
}

pub fn score_candidates(
    scorer: &dyn Scorer,
    state: &ObsState,
    task: &Task,
    candidates: &CandidateSet,
) -> Result<Vec<f64>, AgentError> {
    scorer.score(state, task, &candidates.actions)
}

#[derive(Clone, Copy)]
pub enum Policy<'a> {
    /// Proposer's own first choice.
    Prompting,
    /// Uniform over all candidate slots.
    Random,
    EpsGreedy(f64),
    BestOfQ(&'a dyn Scorer),
    /// Picks the oracle-best candidate with probability `accuracy`,
    /// otherwise a uniformly chosen other candidate.
    NoisyOracle { scorer: &'a OracleScorer, accuracy: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BehaviorTag {
    Prompting,
    Random,
    EpsGreedy { epsilon: f64 },
    BestOfQ { checkpoint: String },
    NoisyOracle { accuracy: f64 },
}

impl std::fmt::Display for BehaviorTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BehaviorTag::Prompting => write!(f, "prompting"),
            BehaviorTag::Random => write!(f, "random"),
            BehaviorTag::EpsGreedy { epsilon } => write!(f, "eps_greedy({epsilon})"),
            BehaviorTag::BestOfQ { checkpoint } => write!(f, "best_of_q({checkpoint})"),
            BehaviorTag::NoisyOracle { accuracy } => write!(f, "noisy_oracle({accuracy})"),
        }
    }
}

impl Policy<'_> {
    pub fn tag(&self) -> BehaviorTag {
        match self {
            Policy::Prompting => BehaviorTag::Prompting,
            Policy::Random => BehaviorTag::Random,
            Policy::EpsGreedy(epsilon) => BehaviorTag::EpsGreedy { epsilon: *epsilon },
            Policy::BestOfQ(s) => BehaviorTag::BestOfQ { checkpoint: s.id() },
            Policy::NoisyOracle { accuracy, .. } => BehaviorTag::NoisyOracle { accuracy: *accuracy },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub state: ObsState,
    pub candidates: CandidateSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    /// `V(s)` from the scorer, when it has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    pub chosen: usize,
    pub action: Action,
    pub reward: f64,
    pub done: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub misgrounded: bool,
}

impl StepRecord {
    pub fn chosen_score(&self) -> Option<f64> {
        self.scores.as_ref().map(|s| s[self.chosen])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRecord {
    pub episode_format: u32,
    pub task: String,
    pub policy: BehaviorTag,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub final_state: ObsState,
    pub success: bool,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// State reached after step `i`.
    pub fn next_state(&self, i: usize) -> &ObsState {
        self.steps.get(i + 1).map_or(&self.final_state, |s| &s.state)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("episode serializes")
    }
}

/// Proposer configuration used for one episode: the configured seed mixed
/// with the episode seed, so repeats of a task see fresh candidates.
pub fn episode_proposer(proposer: &ProposerConfig, seed: u64) -> ProposerConfig {
    proposer.with_seed(seed::derive(proposer.seed, &["episode", &seed.to_string()]))
}

pub fn run_episode(
    world: &NavWorld,
    task: &Task,
    policy: Policy<'_>,
    proposer: &ProposerConfig,
    seed: u64,
) -> Result<EpisodeRecord, AgentError> {
    let prop = episode_proposer(proposer, seed);
    let mut rng = seed::rng(seed::derive(seed, &["select"]));
    let mut state = world.reset(task);
    let mut steps = Vec::new();
    let mut success = false;
    loop {
        let full = proposer::propose(&prop, world, &state)?;
        let (candidates, scores, value, chosen) = match policy {
            Policy::Prompting => (full.truncated(1), None, None, 0),
            Policy::Random => {
                let i = proposer::random_select(&full, &mut rng);
                (full, None, None, i)
            }
            Policy::EpsGreedy(eps) => {
                let i = proposer::epsilon_greedy_select(&full, eps, &mut rng);
                (full, None, None, i)
            }
            Policy::BestOfQ(scorer) => {
                let scores = score_candidates(scorer, &state, task, &full)?;
                let i = best_of_q_select(&scores).map_err(|e| name_candidate(e, &full))?;
                let v = scorer.value(&state, task)?;
                (full, Some(scores), v, i)
            }
            Policy::NoisyOracle { scorer, accuracy } => {
                let scores = score_candidates(scorer, &state, task, &full)?;
                let best = best_of_q_select(&scores)?;
                let i = noisy_pick(best, full.len(), accuracy, &mut rng);
                (full, Some(scores), None, i)
            }
        };
        if candidates.is_empty() {
            return Err(AgentError::Empty);
        }
        let action = candidates.actions[chosen].clone();
        let out = world.step(&state, &action)?;
        success |= out.reward > 0.0;
        steps.push(StepRecord {
            state,
            candidates,
            scores,
            value,
            chosen,
            action,
            reward: out.reward,
            done: out.done,
            misgrounded: out.misgrounded,
        });
        state = out.state;
        if out.done {
            break;
        }
    }
    Ok(EpisodeRecord {
        episode_format: EPISODE_FORMAT,
        task: task.id.clone(),
        policy: policy.tag(),
        seed,
        steps,
        final_state: state,
        success,
    })
}

fn noisy_pick(best: usize, n: usize, accuracy: f64, rng: &mut impl rand::Rng) -> usize {
    if n <= 1 || rng.random::<f64>() < accuracy {
        return best;
    }
    let other = rng.random_range(0..n - 1);
    if other >= best {
        other + 1
    } else {
        other
    }
}

fn name_candidate(e: AgentError, set: &CandidateSet) -> AgentError {
    match e {
        AgentError::NonFiniteScore { index, score, .. } => {
            AgentError::NonFiniteScore { index, action: set.actions[index].to_string(), score }
        }
        other => other,
    }
}
