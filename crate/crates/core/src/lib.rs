//! Deterministic single-process simulator for adaptive personalized
//! cross-silo federated learning.
//!
//! Every client keeps a core model that it shares with the other clients
//! and a vector of directed-relationship weights that mixes the downloaded
//! core models into its personalized model. Baselines (FedAvg, FedProx,
//! fine-tuned variants, separate training) run on the same data pipeline
//! and metrics path.

pub mod apple;
pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod numerics;
pub mod seed;

pub use config::{Algorithm, RunConfig};
pub use error::{Error, Result};
pub use experiment::{prepare, train, Checkpoint, TrainOptions, TrainSummary};
pub use numerics::{ModelSpec, ParamVector};
