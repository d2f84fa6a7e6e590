//! Implicit Q-Learning over fixed embeddings.
//!
//! Each gradient step samples one batch with replacement, fits `V_psi(s)` to
//! the target network's `Q(s, a)` with the asymmetric expectile loss, then
//! regresses `Q_theta(s, a)` on `r + gamma * V_psi(s') * (1 - done)`. The
//! target network is a hard copy of `theta` refreshed every
//! `target_period` steps. Q is only ever evaluated on dataset pairs.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{concatenate, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collect::Transition;
use crate::embed::{Embedder, EmbedderConfig};
use crate::env::{Action, ObsState, Task};
use crate::nn::{AdamConfig, Mlp, MlpRecord, MlpSpec, Mode, NnError, OptimState};
use crate::scalar::Scalar;
use crate::seed;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("transition {index} refers to unknown task `{task}`")]
    UnknownTask { index: usize, task: String },
    #[error("non-finite {what} at step {step} (batch fingerprint {fingerprint})")]
    NonFinite { what: &'static str, step: u64, fingerprint: String },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub latent: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { latent: 32, hidden: vec![64, 64, 32], dropout: 0.1 }
    }
}

impl NetConfig {
    /// Full-width architecture: latent 1024, trunk [1024, 1024, 512, 256, 128, 64].
    pub fn full_scale() -> Self {
        NetConfig { latent: 1024, hidden: vec![1024, 1024, 512, 256, 128, 64], dropout: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub tau: f64,
    pub gamma: f64,
    pub base_lr: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub target_period: u64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.7,
            gamma: 0.99,
            base_lr: 3e-4,
            total_steps: 5_000,
            batch_size: 128,
            target_period: 100,
            grad_clip: 1.0,
            weight_decay: 1e-4,
            seed: 0,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau must lie in (0, 1)");
        }
        if !(self.gamma >= 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.target_period == 0 {
            return bad("target_period must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.base_lr > 0.0 && self.grad_clip > 0.0 && self.weight_decay >= 0.0) {
            return bad("base_lr and grad_clip must be positive, weight_decay non-negative");
        }
        Ok(())
    }

    /// Expectile suggested by the dataset's success rate: datasets dominated
    /// by failures get the lower value to avoid over-confident values.
    pub fn suggested_tau(success_rate: f64) -> f64 {
        if success_rate >= 0.5 {
            0.8
        } else {
            0.7
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            base_lr: self.base_lr,
            total_steps: self.total_steps,
            weight_decay: self.weight_decay,
            clip_norm: self.grad_clip,
            ..AdamConfig::default()
        }
    }
}

/// `|tau - 1[u < 0]| * u^2`.
pub fn expectile_loss<T: Scalar>(u: T, tau: T) -> T {
    expectile_weight(u, tau) * u * u
}

/// Derivative of [`expectile_loss`] with respect to `u`.
pub fn expectile_loss_grad<T: Scalar>(u: T, tau: T) -> T {
    T::of(2.0) * expectile_weight(u, tau) * u
}

fn expectile_weight<T: Scalar>(u: T, tau: T) -> T {
    if u < T::zero() {
        T::one() - tau
    } else {
        tau
    }
}

/// Q, V and target-Q parameter sets sharing one embedder.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueNets<T> {
    pub q: Mlp<T>,
    pub v: Mlp<T>,
    pub target_q: Mlp<T>,
    pub embedder: EmbedderConfig,
}

impl<T: Scalar> ValueNets<T> {
    pub fn new(embedder: &EmbedderConfig, net: &NetConfig, init_seed: u64) -> Result<Self, NnError> {
        let q_spec = MlpSpec {
            input_groups: vec![embedder.state_dim, embedder.action_dim, embedder.task_dim],
            latent: Some(net.latent),
            hidden: net.hidden.clone(),
            dropout: net.dropout,
        };
        let v_spec = MlpSpec { input_groups: vec![embedder.state_dim, embedder.task_dim], ..q_spec.clone() };
        let q = Mlp::new(q_spec, seed::derive(init_seed, &["init", "q"]))?;
        let v = Mlp::new(v_spec, seed::derive(init_seed, &["init", "v"]))?;
        Ok(ValueNets { target_q: q.clone(), q, v, embedder: embedder.clone() })
    }

    pub fn sync_target(&mut self) {
        self.target_q.params.assign(&self.q.params);
    }

    pub fn embedder_fingerprint(&self) -> String {
        self.embedder.fingerprint()
    }

    /// `Q_theta` in eval mode on concatenated `[state | action | task]` rows.
    pub fn q_batch(&self, rows: &Array2<T>) -> Result<Array1<T>, NnError> {
        self.q.predict(rows.view(), Mode::Eval)
    }

    /// `V_psi` in eval mode on concatenated `[state | task]` rows.
    pub fn v_batch(&self, rows: &Array2<T>) -> Result<Array1<T>, NnError> {
        self.v.predict(rows.view(), Mode::Eval)
    }
}

/// Embedded dataset, one row per transition.
#[derive(Clone, Debug)]
pub struct PreparedData<T> {
    pub q_in: Array2<T>,
    pub v_in: Array2<T>,
    pub v_next_in: Array2<T>,
    pub reward: Array1<T>,
    pub done: Array1<T>,
}

/// Rows gathered for one gradient step.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub indices: Vec<usize>,
    pub q_in: Array2<T>,
    pub v_in: Array2<T>,
    pub v_next_in: Array2<T>,
    pub reward: Array1<T>,
    pub done: Array1<T>,
}

impl<T: Scalar> PreparedData<T> {
    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }

    pub fn batch(&self, indices: Vec<usize>) -> Batch<T> {
        Batch {
            q_in: self.q_in.select(Axis(0), &indices),
            v_in: self.v_in.select(Axis(0), &indices),
            v_next_in: self.v_next_in.select(Axis(0), &indices),
            reward: self.reward.select(Axis(0), &indices),
            done: self.done.select(Axis(0), &indices),
            indices,
        }
    }

    pub fn all(&self) -> Batch<T> {
        self.batch((0..self.len()).collect())
    }
}

impl<T> Batch<T> {
    pub fn fingerprint(&self) -> String {
        let bytes: Vec<u8> = self.indices.iter().flat_map(|i| (*i as u64).to_le_bytes()).collect();
        seed::sha256_hex(&bytes)[..16].to_string()
    }
}

fn to_row<T: Scalar>(parts: &[&[f64]]) -> Vec<T> {
    parts.iter().flat_map(|p| p.iter().map(|&x| T::of(x))).collect()
}

/// Embeds every transition. Identical states share one embedding call.
pub fn prepare<T: Scalar>(dataset: &[Transition], tasks: &[Task], embedder: &Embedder) -> Result<PreparedData<T>, TrainError> {
    let task_vecs: HashMap<&str, Vec<f64>> = tasks.iter().map(|t| (t.id.as_str(), embedder.embed_task(t))).collect();
    let mut state_cache: HashMap<String, Vec<f64>> = HashMap::new();
    let mut action_cache: HashMap<String, Vec<f64>> = HashMap::new();
    let mut embed_state = |s: &ObsState| -> Vec<f64> {
        state_cache.entry(s.key()).or_insert_with(|| embedder.embed_state(s)).clone()
    };
    let mut embed_action = |a: &Action| -> Vec<f64> {
        action_cache.entry(a.to_string()).or_insert_with(|| embedder.embed_action(a)).clone()
    };
    let n = dataset.len();
    let cfg = embedder.config();
    let (ds, da, dt) = (cfg.state_dim, cfg.action_dim, cfg.task_dim);
    let mut q_in = Vec::with_capacity(n * (ds + da + dt));
    let mut v_in = Vec::with_capacity(n * (ds + dt));
    let mut v_next_in = Vec::with_capacity(n * (ds + dt));
    let mut reward = Vec::with_capacity(n);
    let mut done = Vec::with_capacity(n);
    for (index, t) in dataset.iter().enumerate() {
        let task = task_vecs
            .get(t.state.task.as_str())
            .ok_or_else(|| TrainError::UnknownTask { index, task: t.state.task.clone() })?;
        let s = embed_state(&t.state);
        let s2 = embed_state(&t.next_state);
        let a = embed_action(&t.action);
        q_in.extend(to_row::<T>(&[&s, &a, task]));
        v_in.extend(to_row::<T>(&[&s, task]));
        v_next_in.extend(to_row::<T>(&[&s2, task]));
        reward.push(T::of(t.reward));
        done.push(if t.done { T::one() } else { T::zero() });
    }
    let shape = |w: usize, v: Vec<T>| Array2::from_shape_vec((n, w), v).expect("row widths match");
    Ok(PreparedData {
        q_in: shape(ds + da + dt, q_in),
        v_in: shape(ds + dt, v_in),
        v_next_in: shape(ds + dt, v_next_in),
        reward: Array1::from(reward),
        done: Array1::from(done),
    })
}

/// Expectile regression of `V_psi(s)` on the detached target `Q(s, a)`.
/// Returns the mean loss and the gradient for `psi`.
pub fn v_loss<T: Scalar>(nets: &ValueNets<T>, batch: &Batch<T>, tau: T, mode: Mode) -> Result<(T, Array1<T>), NnError> {
    let target = nets.target_q.predict(batch.q_in.view(), Mode::Eval)?;
    let (v, tape) = nets.v.forward(batch.v_in.view(), mode)?;
    let n = T::of(batch.indices.len() as f64);
    let diff = &target - &v;
    let loss = diff.iter().map(|&u| expectile_loss(u, tau)).sum::<T>() / n;
    // d/dv of L(target - v) = -L'(u)
    let upstream = diff.mapv(|u| -expectile_loss_grad(u, tau) / n);
    let grads = nets.v.backward(&tape, upstream.view())?;
    Ok((loss, grads))
}

/// Squared TD error of `Q_theta(s, a)` against `r + gamma * V_psi(s') * (1 - done)`
/// with `V_psi` detached. Returns mean loss, gradient for `theta` and the
/// mean absolute Bellman residual.
pub fn q_loss<T: Scalar>(nets: &ValueNets<T>, batch: &Batch<T>, gamma: T, mode: Mode) -> Result<(T, Array1<T>, T), NnError> {
    let next_v = nets.v.predict(batch.v_next_in.view(), Mode::Eval)?;
    let target = td_target(batch.reward.view(), next_v.view(), batch.done.view(), gamma);
    let (q, tape) = nets.q.forward(batch.q_in.view(), mode)?;
    let n = T::of(batch.indices.len() as f64);
    let diff = &q - &target;
    let loss = diff.iter().map(|&d| d * d).sum::<T>() / n;
    let residual = diff.iter().map(|d| d.abs()).sum::<T>() / n;
    let upstream = diff.mapv(|d| T::of(2.0) * d / n);
    let grads = nets.q.backward(&tape, upstream.view())?;
    Ok((loss, grads, residual))
}

pub fn td_target<T: Scalar>(reward: ArrayView1<'_, T>, next_v: ArrayView1<'_, T>, done: ArrayView1<'_, T>, gamma: T) -> Array1<T> {
    let mut out = reward.to_owned();
    ndarray::Zip::from(&mut out).and(&next_v).and(&done).for_each(|o, &v, &d| {
        *o += gamma * v * (T::one() - d);
    });
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub v_loss: f64,
    pub q_loss: f64,
    pub bellman_residual: f64,
    pub lr: f64,
    pub target_sync: bool,
}

pub fn metrics_csv(metrics: &[StepMetrics]) -> String {
    let mut out = String::from("step,v_loss,q_loss,bellman_residual,lr,target_sync_flag\n");
    for m in metrics {
        let _ = writeln!(out, "{},{},{},{},{},{}", m.step, m.v_loss, m.q_loss, m.bellman_residual, m.lr, u8::from(m.target_sync));
    }
    out
}

/// Instrumentation hooks called from inside the training loop.
pub trait TrainObserver<T> {
    /// Dataset rows fed to a Q-network (online or target) forward pass.
    fn q_queries(&mut self, _rows: &[usize]) {}
    /// Called after each completed gradient step with the step count.
    fn step_end(&mut self, _step: u64, _nets: &ValueNets<T>) {}
}

impl<T> TrainObserver<T> for () {}

#[derive(Clone, Debug)]
pub struct TrainOutput<T> {
    pub nets: ValueNets<T>,
    pub metrics: Vec<StepMetrics>,
}

pub fn train<T: Scalar>(
    dataset: &[Transition],
    tasks: &[Task],
    embedder: &Embedder,
    config: &TrainConfig,
) -> Result<TrainOutput<T>, TrainError> {
    train_observed(dataset, tasks, embedder, config, &mut ())
}

pub fn train_observed<T: Scalar>(
    dataset: &[Transition],
    tasks: &[Task],
    embedder: &Embedder,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutput<T>, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let data = prepare::<T>(dataset, tasks, embedder)?;
    let mut nets = ValueNets::<T>::new(embedder.config(), &config.net, config.seed)?;
    train_prepared(&data, &mut nets, config, observer).map(|metrics| TrainOutput { nets, metrics })
}

/// The gradient-step loop on already embedded data.
pub fn train_prepared<T: Scalar>(
    data: &PreparedData<T>,
    nets: &mut ValueNets<T>,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver<T>,
) -> Result<Vec<StepMetrics>, TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut v_opt = OptimState::<T>::new(config.adam(), nets.v.num_params());
    let mut q_opt = OptimState::<T>::new(config.adam(), nets.q.num_params());
    let v_mask = nets.v.weight_mask();
    let q_mask = nets.q.weight_mask();
    let (tau, gamma) = (T::of(config.tau), T::of(config.gamma));
    let mut rng = seed::rng(seed::derive(config.seed, &["batches"]));
    let mut metrics = Vec::with_capacity(config.total_steps as usize);
    let n = data.len();

    for step in 0..config.total_steps {
        let indices: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..n)).collect();
        let batch = data.batch(indices);
        let step_label = step.to_string();
        let non_finite = |what| TrainError::NonFinite { what, step, fingerprint: batch.fingerprint() };

        observer.q_queries(&batch.indices);
        let v_mode = Mode::Train { mask_seed: seed::derive(config.seed, &["mask", "v", &step_label]) };
        let (vl, v_grads) = v_loss(nets, &batch, tau, v_mode)?;
        if !vl.is_finite() {
            return Err(non_finite("v_loss"));
        }
        let lr = v_opt.lr();
        v_opt.apply(&mut nets.v.params, v_grads, &v_mask).map_err(|_| non_finite("v gradient"))?;

        observer.q_queries(&batch.indices);
        let q_mode = Mode::Train { mask_seed: seed::derive(config.seed, &["mask", "q", &step_label]) };
        let (ql, q_grads, residual) = q_loss(nets, &batch, gamma, q_mode)?;
        if !ql.is_finite() {
            return Err(non_finite("q_loss"));
        }
        q_opt.apply(&mut nets.q.params, q_grads, &q_mask).map_err(|_| non_finite("q gradient"))?;

        let done_steps = step + 1;
        let sync = done_steps % config.target_period == 0;
        if sync {
            nets.sync_target();
        }
        metrics.push(StepMetrics {
            step: done_steps,
            v_loss: vl.as_f64(),
            q_loss: ql.as_f64(),
            bellman_residual: residual.as_f64(),
            lr: lr.as_f64(),
            target_sync: sync,
        });
        observer.step_end(done_steps, nets);
    }
    Ok(metrics)
}

/// On-disk form of trained networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint<T> {
    pub checkpoint_format: u32,
    pub embedder: EmbedderConfig,
    pub embedder_fingerprint: String,
    pub train: TrainConfig,
    pub steps: u64,
    pub q: MlpRecord<T>,
    pub v: MlpRecord<T>,
    pub target_q: MlpRecord<T>,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed checkpoint: {0}")]
    Parse(String),
    #[error("unsupported checkpoint_format {0}")]
    Format(u32),
    #[error("embedder fingerprint mismatch: checkpoint {stored}, config {actual}")]
    Fingerprint { stored: String, actual: String },
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(nets: &ValueNets<T>, train: &TrainConfig, steps: u64) -> Self {
        Checkpoint {
            checkpoint_format: CHECKPOINT_FORMAT,
            embedder: nets.embedder.clone(),
            embedder_fingerprint: nets.embedder_fingerprint(),
            train: train.clone(),
            steps,
            q: nets.q.to_record(),
            v: nets.v.to_record(),
            target_q: nets.target_q.to_record(),
        }
    }

    pub fn into_nets(self) -> Result<ValueNets<T>, CheckpointError> {
        if self.checkpoint_format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Format(self.checkpoint_format));
        }
        let actual = self.embedder.fingerprint();
        if actual != self.embedder_fingerprint {
            return Err(CheckpointError::Fingerprint { stored: self.embedder_fingerprint, actual });
        }
        Ok(ValueNets {
            q: Mlp::from_record(self.q)?,
            v: Mlp::from_record(self.v)?,
            target_q: Mlp::from_record(self.target_q)?,
            embedder: self.embedder,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, CheckpointError> {
        serde_json::from_str(s).map_err(|e| CheckpointError::Parse(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let s = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&s)
    }
}

/// Concatenates embedding parts into network input rows.
pub fn rows<T: Scalar>(parts: &[Vec<Vec<f64>>]) -> Array2<T> {
    let views: Vec<Array2<T>> = parts
        .iter()
        .map(|col| {
            let w = col.first().map_or(0, Vec::len);
            Array2::from_shape_vec((col.len(), w), col.iter().flat_map(|r| r.iter().map(|&x| T::of(x))).collect())
                .expect("equal widths")
        })
        .collect();
    let v: Vec<_> = views.iter().map(|a| a.view()).collect();
    concatenate(Axis(1), &v).expect("equal row counts")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expectile_values() {
        assert!((expectile_loss(1.0f64, 0.7) - 0.7).abs() < 1e-12);
        assert_eq!(expectile_loss(0.0f64, 0.3), 0.0);
        assert!((expectile_loss(-2.0f64, 0.7) - 1.2).abs() < 1e-12);
        // finite-difference check of the derivative away from the kink
        for &u in &[-1.3f64, -0.2, 0.4, 2.0] {
            let h = 1e-6;
            let fd = (expectile_loss(u + h, 0.8) - expectile_loss(u - h, 0.8)) / (2.0 * h);
            assert!((fd - expectile_loss_grad(u, 0.8)).abs() < 1e-6);
        }
    }

    #[test]
    fn td_target_masks_terminal_bootstrap() {
        let r = Array1::from(vec![1.0, 0.0, 0.5]);
        let v = Array1::from(vec![3.0, 2.0, 2.0]);
        let d = Array1::from(vec![1.0, 0.0, 0.0]);
        assert_eq!(td_target(r.view(), v.view(), d.view(), 0.5).to_vec(), vec![1.0, 1.0, 1.5]);
        assert_eq!(td_target(r.view(), v.view(), d.view(), 0.0).to_vec(), r.to_vec());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { tau: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { target_period: 0, ..Default::default() }.validate().is_err());
        assert_eq!(TrainConfig::suggested_tau(0.9), 0.8);
        assert_eq!(TrainConfig::suggested_tau(0.2), 0.7);
    }
}
