//! Offline-trained Q-functions reranking the candidates of a frozen action
//! proposer, exercised in a synthetic navigation environment with exact
//! oracles.
//!
//! The numeric core (`nn`, `iql`, `oracle`) is generic over [`Scalar`];
//! the pipeline and command-line tool use the aliases below.

#![allow(clippy::too_many_arguments)]

pub mod agent;
pub mod collect;
pub mod config;
pub mod embed;
pub mod env;
pub mod eval;
pub mod iql;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod proposer;
pub mod scalar;
pub mod seed;

pub use scalar::Scalar;

/// Scalar used by the pipeline's value networks.
pub type Real = f32;
pub type Nets = iql::ValueNets<Real>;
pub type Mlp = nn::Mlp<Real>;
pub type TrainOutput = iql::TrainOutput<Real>;
/// Exact probabilities and currency amounts.
pub type Exact = num_rational::Ratio<i128>;
