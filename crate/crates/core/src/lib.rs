//! Deterministic federated pre-training simulator.
//!
//! The crate builds a pre-trained initialization for downstream federated
//! learning with a meta-learned, fairness-balanced objective ([`coprefl`]),
//! alongside the baselines it is compared with ([`baselines`]) and a harness
//! that measures the downstream accuracy distribution across clients
//! ([`downstream`]).
//!
//! Every source of randomness flows from a single seed through
//! [`rng::RngPolicy`]; runs are bit-reproducible regardless of thread count.

pub mod baselines;
pub mod coprefl;
pub mod data;
pub mod downstream;
pub mod error;
pub mod fl;
pub mod io;
pub mod model;
pub mod rng;

pub use coprefl::{BalancerConfig, MetaLossReport, PretrainResult};
pub use data::{ClassSplit, ClientShard, Distribution, FederatedDataset, LabeledDataset};
pub use downstream::{
    AlgoParams, DownstreamAlgorithm, SuiteReport, TaskMetrics, TaskParams, TaskSpec,
};
pub use error::{Error, Result};
pub use fl::{ClientUpdate, RoundConfig};
pub use model::{Batch, GradientVector, ModelSpec, ParameterVector};
pub use rng::RngPolicy;
