//! Simulated frozen candidate proposer plus the selection rules used for data
//! collection and baselines.
//!
//! Competence is controlled by two knobs: `golden_recall` (how often the next
//! shortest-path action is among the candidates) and `greedy_first` (how
//! often it is ranked first when present). Filler slots never contain an
//! optimal action unless the page offers nothing else, so a missed golden
//! action is only recovered by rare collisions.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, EnvError, NavWorld, ObsState};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposerConfig {
    pub n_candidates: usize,
    pub golden_recall: f64,
    pub greedy_first: f64,
    pub placeholder_rate: f64,
    pub seed: u64,
}

impl Default for ProposerConfig {
    fn default() -> Self {
        ProposerConfig { n_candidates: 3, golden_recall: 0.85, greedy_first: 0.5, placeholder_rate: 0.3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProposerError {
    #[error("n_candidates must be at least 1")]
    NoCandidates,
    #[error("{name} = {value} is outside [0, 1]")]
    Probability { name: &'static str, value: f64 },
    #[error(transparent)]
    Env(#[from] EnvError),
}

impl ProposerConfig {
    pub fn validate(&self) -> Result<(), ProposerError> {
        if self.n_candidates == 0 {
            return Err(ProposerError::NoCandidates);
        }
        for (name, value) in [
            ("golden_recall", self.golden_recall),
            ("greedy_first", self.greedy_first),
            ("placeholder_rate", self.placeholder_rate),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ProposerError::Probability { name, value });
            }
        }
        Ok(())
    }

    pub fn with_candidates(&self, n: usize) -> Self {
        ProposerConfig { n_candidates: n, ..self.clone() }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ProposerConfig { seed, ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Golden,
    Plausible,
    Placeholder,
}

/// Proposer output; slot 0 is the proposer's greedy choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateSet {
    pub actions: Vec<Action>,
    pub provenance: Vec<Provenance>,
    /// Fewer distinct actions than requested were available.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub short: bool,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn position(&self, action: &Action) -> Option<usize> {
        self.actions.iter().position(|a| a == action)
    }

    /// The first `n` slots.
    pub fn truncated(&self, n: usize) -> CandidateSet {
        let n = n.min(self.len());
        CandidateSet { actions: self.actions[..n].to_vec(), provenance: self.provenance[..n].to_vec(), short: self.short }
    }
}

/// Draws the candidate set for `state`. Deterministic in
/// `(config, task, step, state)`.
pub fn propose(config: &ProposerConfig, world: &NavWorld, state: &ObsState) -> Result<CandidateSet, ProposerError> {
    config.validate()?;
    let task = world.task(&state.task)?;
    let dist = world.distances(task);
    let optimal = world.optimal_actions(task, &dist, state.page)?;
    let golden = optimal.first().cloned();

    let mut rng = seed::rng(seed::derive(config.seed, &["propose", &state.key()]));
    let include_golden = golden.is_some() && rng.random::<f64>() < config.golden_recall;

    let mut navs = Vec::new();
    let mut placeholders = Vec::new();
    let mut spare_optimal = Vec::new();
    for a in world.markov_actions(task, state.page)? {
        if optimal.contains(&a) {
            if Some(&a) != golden.as_ref() {
                spare_optimal.push(a);
            }
            continue;
        }
        if Action::PLACEHOLDERS.contains(&a) {
            placeholders.push(a);
        } else {
            navs.push(a);
        }
    }
    navs.shuffle(&mut rng);
    placeholders.shuffle(&mut rng);
    spare_optimal.shuffle(&mut rng);

    let want_fillers = config.n_candidates - usize::from(include_golden);
    let mut actions = Vec::with_capacity(config.n_candidates);
    let mut provenance = Vec::with_capacity(config.n_candidates);
    for _ in 0..want_fillers {
        let prefer_placeholder = rng.random::<f64>() < config.placeholder_rate;
        let (first, second, kinds) = if prefer_placeholder {
            (&mut placeholders, &mut navs, [Provenance::Placeholder, Provenance::Plausible])
        } else {
            (&mut navs, &mut placeholders, [Provenance::Plausible, Provenance::Placeholder])
        };
        if let Some(a) = first.pop() {
            actions.push(a);
            provenance.push(kinds[0]);
        } else if let Some(a) = second.pop() {
            actions.push(a);
            provenance.push(kinds[1]);
        } else if let Some(a) = spare_optimal.pop() {
            // Only reached on pages where nearly every action is optimal.
            actions.push(a);
            provenance.push(Provenance::Plausible);
        } else {
            break;
        }
    }

    if include_golden {
        let slot = if actions.is_empty() || rng.random::<f64>() < config.greedy_first {
            0
        } else {
            rng.random_range(1..=actions.len())
        };
        actions.insert(slot, golden.expect("checked above"));
        provenance.insert(slot, Provenance::Golden);
    }
    let short = actions.len() < config.n_candidates;
    Ok(CandidateSet { actions, provenance, short })
}

/// Slot 0 with probability `1 - epsilon`, otherwise uniform over the other
/// slots. A single candidate is always chosen.
pub fn epsilon_greedy_select(candidates: &CandidateSet, epsilon: f64, rng: &mut impl Rng) -> usize {
    let n = candidates.len();
    if n <= 1 {
        return 0;
    }
    if rng.random::<f64>() < epsilon {
        rng.random_range(1..n)
    } else {
        0
    }
}

/// Uniform over all slots.
pub fn random_select(candidates: &CandidateSet, rng: &mut impl Rng) -> usize {
    match candidates.len() {
        0 | 1 => 0,
        n => rng.random_range(0..n),
    }
}
