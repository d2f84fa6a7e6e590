//! Frozen hashed-feature extractor producing separate state, action and task
//! vectors.
//!
//! Every token (page id, action string, task description) maps to a seeded
//! Gaussian direction; vectors are unit-normalized sums of those directions.
//! Nothing here carries mutable state, so embeddings of a fixed input are
//! constant for the life of a run and across runs with the same config.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{Action, ObsState, Task};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub task_dim: usize,
    pub seed: u64,
    /// Weight of a history entry is `history_decay^age`, the latest action
    /// having age 1. Must lie in `[0, 1)`.
    pub history_decay: f64,
    /// Weight of the step-index direction in the state vector. Zero keeps the
    /// state embedding a function of page and history only.
    pub step_weight: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig { state_dim: 64, action_dim: 64, task_dim: 64, seed: 0x5EED, history_decay: 0.3, step_weight: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum EmbedError {
    #[error("embedding dims must be positive")]
    ZeroDim,
    #[error("history_decay must lie in [0, 1), got {0}")]
    Decay(String),
    #[error("step_weight must be finite and non-negative, got {0}")]
    StepWeight(String),
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.state_dim == 0 || self.action_dim == 0 || self.task_dim == 0 {
            return Err(EmbedError::ZeroDim);
        }
        if !(0.0..1.0).contains(&self.history_decay) {
            return Err(EmbedError::Decay(self.history_decay.to_string()));
        }
        if !(self.step_weight.is_finite() && self.step_weight >= 0.0) {
            return Err(EmbedError::StepWeight(self.step_weight.to_string()));
        }
        Ok(())
    }

    /// Short content hash identifying this extractor; checkpoints and
    /// datasets carry it so train and serve provably agree.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        seed::sha256_hex(json.as_bytes())[..16].to_string()
    }
}

/// Embeddings of one `(state, action, task)` triple.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTriple {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub task: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedder {
    config: EmbedderConfig,
}

impl Embedder {
    pub fn new(config: EmbedderConfig) -> Result<Self, EmbedError> {
        config.validate()?;
        Ok(Embedder { config })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    fn direction(&self, domain: &str, token: &str, dim: usize) -> Vec<f64> {
        let mut rng = seed::rng(seed::derive(self.config.seed, &[domain, token]));
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        normalized(v)
    }

    pub fn embed_state(&self, state: &ObsState) -> Vec<f64> {
        let dim = self.config.state_dim;
        let mut v = self.direction("page", &state.page.0.to_string(), dim);
        if self.config.step_weight > 0.0 {
            let s = self.direction("step", &state.step.to_string(), dim);
            axpy(&mut v, self.config.step_weight, &s);
        }
        let decay = self.config.history_decay;
        if decay > 0.0 {
            let mut w = 1.0;
            for a in state.history.iter().rev() {
                w *= decay;
                if w < 1e-12 {
                    break;
                }
                axpy(&mut v, w, &self.direction("hist", &a.to_string(), dim));
            }
        }
        normalized(v)
    }

    pub fn embed_action(&self, action: &Action) -> Vec<f64> {
        self.direction("action", &action.to_string(), self.config.action_dim)
    }

    pub fn embed_task(&self, task: &Task) -> Vec<f64> {
        self.direction("task", &task.description, self.config.task_dim)
    }

    pub fn embed(&self, state: &ObsState, action: &Action, task: &Task) -> EmbeddingTriple {
        EmbeddingTriple { state: self.embed_state(state), action: self.embed_action(action), task: self.embed_task(task) }
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else if let Some(first) = v.first_mut() {
        *first = 1.0;
    }
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{AffordanceId, PageId};

    fn state(history: Vec<Action>) -> ObsState {
        ObsState { task: "t".into(), page: PageId(3), step: history.len() as u32, history, back: vec![] }
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn frozen_and_unit_norm() {
        let e = Embedder::new(EmbedderConfig::default()).unwrap();
        let s = state(vec![Action::Wait, Action::Navigate(AffordanceId(2))]);
        let a = e.embed_state(&s);
        assert_eq!(a, e.embed_state(&s));
        assert_eq!(a.len(), 64);
        assert!((norm(&a) - 1.0).abs() < 1e-9);
        assert!((norm(&e.embed_action(&Action::Restart)) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn history_changes_state_vector() {
        let e = Embedder::new(EmbedderConfig::default()).unwrap();
        let c = cosine(&e.embed_state(&state(vec![])), &e.embed_state(&state(vec![Action::Wait])));
        assert!(c < 1.0 - 1e-6, "cosine {c}");
        assert!(c > 0.8, "page identity should dominate, cosine {c}");
    }

    #[test]
    fn zero_decay_ignores_history() {
        let e = Embedder::new(EmbedderConfig { history_decay: 0.0, ..Default::default() }).unwrap();
        assert_eq!(e.embed_state(&state(vec![])), e.embed_state(&state(vec![Action::Wait, Action::Refresh])));
    }

    #[test]
    fn step_weight_separates_steps() {
        let e = Embedder::new(EmbedderConfig { history_decay: 0.0, step_weight: 1.0, ..Default::default() }).unwrap();
        let mut s1 = state(vec![]);
        let mut s2 = s1.clone();
        s1.step = 1;
        s2.step = 2;
        assert!(cosine(&e.embed_state(&s1), &e.embed_state(&s2)) < 0.9);
    }

    #[test]
    fn identical_actions_share_vectors() {
        let e = Embedder::new(EmbedderConfig::default()).unwrap();
        assert_eq!(e.embed_action(&Action::Wait), e.embed_action(&Action::Wait));
    }

    #[test]
    fn distinct_tokens_are_nearly_orthogonal_across_seeds() {
        let a1 = Action::Navigate(AffordanceId(1));
        let a2 = Action::Navigate(AffordanceId(2));
        let t1 = Task::new("x", PageId(0), [PageId(1)]);
        let t2 = Task::new("y", PageId(0), [PageId(1)]);
        let (mut bad_a, mut bad_t) = (0, 0);
        for s in 0..1000u64 {
            let e = Embedder::new(EmbedderConfig { seed: s, ..Default::default() }).unwrap();
            if cosine(&e.embed_action(&a1), &e.embed_action(&a2)).abs() >= 0.5 {
                bad_a += 1;
            }
            if cosine(&e.embed_task(&t1), &e.embed_task(&t2)).abs() >= 0.5 {
                bad_t += 1;
            }
        }
        // |cos| of random unit vectors in 64 dims exceeds 0.5 with
        // probability ~3e-5 per pair.
        assert!(bad_a <= 2 && bad_t <= 2, "{bad_a} {bad_t}");
    }

    #[test]
    fn config_validation_and_fingerprint() {
        assert!(Embedder::new(EmbedderConfig { history_decay: 1.0, ..Default::default() }).is_err());
        assert!(Embedder::new(EmbedderConfig { task_dim: 0, ..Default::default() }).is_err());
        let a = EmbedderConfig::default();
        let b = EmbedderConfig { seed: 1, ..Default::default() };
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
