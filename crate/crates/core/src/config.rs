//! Run configuration: one TOML file plus a seed determines a pipeline.
//!
//! ```toml
//! seed = 1
//! output_dir = "out"          # relative to the config file
//!
//! [world]
//! pages = 50
//! branching = 4
//! tasks = 20
//! horizon = 12
//!
//! [proposer]
//! golden_recall = 0.85
//! greedy_first = 0.5
//!
//! [train]
//! total_steps = 5000
//!
//! [train.net]
//! hidden = [64, 64, 32]
//! ```
//!
//! Every section is optional and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collect::Schedule;
use crate::embed::EmbedderConfig;
use crate::env::WorldSpec;
use crate::eval::CostModel;
use crate::iql::TrainConfig;
use crate::proposer::ProposerConfig;

/// Overrides `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "BESTOFQ_OUTPUT_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid [{section}] section: {message}")]
    Invalid { section: &'static str, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub repeats: usize,
    /// Benchmark seed; evaluation episodes never share seeds with collection.
    pub seed: u64,
    /// Inference-time candidate counts for the N ablation.
    pub n_infer: Vec<usize>,
    /// Accuracy of the noisy-oracle selector baseline.
    pub selector_accuracy: f64,
    pub epsilon: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { repeats: 3, seed: 1_000, n_infer: vec![3, 5, 8], selector_accuracy: 0.8, epsilon: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub world: WorldSpec,
    pub embedder: EmbedderConfig,
    pub proposer: ProposerConfig,
    pub train: TrainConfig,
    pub schedule: Schedule,
    pub eval: EvalConfig,
    pub cost: CostModel,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            world: WorldSpec::default(),
            embedder: EmbedderConfig::default(),
            proposer: ProposerConfig::default(),
            train: TrainConfig::default(),
            schedule: Schedule::default(),
            eval: EvalConfig::default(),
            cost: CostModel::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_string(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; a relative `output_dir` is resolved against the
    /// file's directory and [`OUTPUT_DIR_ENV`] takes precedence.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let mut cfg = Self::from_toml(&text, &path.display().to_string())?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        } else if cfg.output_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |section, message: String| ConfigError::Invalid { section, message };
        self.world.validate().map_err(|e| inv("world", e.to_string()))?;
        self.embedder.validate().map_err(|e| inv("embedder", e.to_string()))?;
        self.proposer.validate().map_err(|e| inv("proposer", e.to_string()))?;
        self.train.validate().map_err(|e| inv("train", e.to_string()))?;
        self.schedule.validate().map_err(|e| inv("schedule", e))?;
        if self.eval.repeats == 0 {
            return Err(inv("eval", "repeats must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.selector_accuracy) || !(0.0..=1.0).contains(&self.eval.epsilon) {
            return Err(inv("eval", "selector_accuracy and epsilon must lie in [0, 1]".into()));
        }
        if self.eval.n_infer.contains(&0) {
            return Err(inv("eval", "n_infer entries must be at least 1".into()));
        }
        for (name, p) in &self.cost.prices {
            for v in [&p.input, &p.output] {
                crate::eval::parse_money(v).map_err(|e| inv("cost", format!("{name}: {e}")))?;
            }
        }
        Ok(())
    }

    /// The fully resolved config, as echoed into output directories.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The desk-scale fixture used by the acceptance suite: 50-page worlds,
    /// 20 tasks, horizon 12, three candidates with recall 0.85 and
    /// first-slot rate 0.5.
    pub fn standard() -> Self {
        RunConfig {
            seed: 1,
            world: WorldSpec { pages: 50, branching: 4, tasks: 20, horizon: 12, ..WorldSpec::default() },
            proposer: ProposerConfig { n_candidates: 3, golden_recall: 0.85, greedy_first: 0.5, ..ProposerConfig::default() },
            ..RunConfig::default()
        }
    }
}
