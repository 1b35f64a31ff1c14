//! Experiment configuration (TOML).
//!
//! Every block is optional and falls back to its defaults. Unknown keys are
//! rejected. After parsing, [`ExperimentConfig::validate`] checks each field
//! against the preconditions of the operation that consumes it and reports the
//! offending field by its dotted path.

use std::path::Path;

use coprefl_core::data::Distribution;
use coprefl_core::downstream::{AlgoParams, DownstreamAlgorithm, TaskParams};
use coprefl_core::{BalancerConfig, ModelSpec, RoundConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {message}")]
    Field { field: String, message: String },
}

fn field_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Meta step on client query sets.
    CopreflS1,
    /// Meta step on partitions of server data.
    CopreflS2,
    /// Scenario-I rounds plus SGD on server data.
    CopreflSgd,
    Fedavg,
    Fedmeta,
    Qffl,
    /// FedAvg followed by server-data SGD every round.
    FedavgServer,
    FedmetaServer,
    QfflServer,
    Centralized,
    Random,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::CopreflS1 => "coprefl_s1",
            Method::CopreflS2 => "coprefl_s2",
            Method::CopreflSgd => "coprefl_sgd",
            Method::Fedavg => "fedavg",
            Method::Fedmeta => "fedmeta",
            Method::Qffl => "qffl",
            Method::FedavgServer => "fedavg_server",
            Method::FedmetaServer => "fedmeta_server",
            Method::QfflServer => "qffl_server",
            Method::Centralized => "centralized",
            Method::Random => "random",
        }
    }

    pub fn uses_server_data(self) -> bool {
        matches!(
            self,
            Method::CopreflS2
                | Method::CopreflSgd
                | Method::FedavgServer
                | Method::FedmetaServer
                | Method::QfflServer
        )
    }

    pub fn is_coprefl(self) -> bool {
        matches!(
            self,
            Method::CopreflS1 | Method::CopreflS2 | Method::CopreflSgd
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionKind {
    Iid,
    Dirichlet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmKind {
    Fedavg,
    Fedprox,
    Qffl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub pretrain_classes: usize,
    pub overlap_classes: usize,
    pub server_frac: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_classes: 20,
            n_per_class: 100,
            dim: 16,
            separation: 4.0,
            pretrain_classes: 15,
            overlap_classes: 0,
            server_frac: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![32] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Method used by `pretrain` and `gamma-sweep`.
    pub method: Method,
    /// Methods compared by `compare`.
    pub methods: Vec<Method>,
    pub clients: usize,
    pub participants: usize,
    pub rounds: usize,
    pub local_lr: f64,
    pub meta_lr: f64,
    pub gamma: f64,
    pub q: f64,
    pub local_iters: usize,
    pub batch_size: usize,
    pub distribution: DistributionKind,
    pub alpha: f64,
    pub support_frac: f64,
    /// Server SGD iterations per round for the server-refined methods.
    pub refine_iters: usize,
    pub fedmeta_outer_lr: f64,
    pub centralized_epochs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            method: Method::CopreflS1,
            methods: vec![Method::Fedavg, Method::CopreflS1],
            clients: 100,
            participants: 20,
            rounds: 50,
            local_lr: 1e-3,
            meta_lr: 1e-3,
            gamma: 0.5,
            q: 1.0,
            local_iters: 5,
            batch_size: 32,
            distribution: DistributionKind::Dirichlet,
            alpha: 0.5,
            support_frac: 0.8,
            refine_iters: 5,
            fedmeta_outer_lr: 1e-3,
            centralized_epochs: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    pub algorithm: AlgorithmKind,
    pub n_way: usize,
    pub clients: usize,
    pub tasks: usize,
    pub rounds: usize,
    pub local_iters: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mu: f64,
    pub q: f64,
    pub distribution: DistributionKind,
    pub alpha: f64,
    pub train_frac: f64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            algorithm: AlgorithmKind::Fedavg,
            n_way: 5,
            clients: 10,
            tasks: 10,
            rounds: 10,
            local_iters: 5,
            lr: 1e-3,
            batch_size: 32,
            mu: 1.0,
            q: 2.0,
            distribution: DistributionKind::Dirichlet,
            alpha: 0.5,
            train_frac: 0.8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub downstream: DownstreamConfig,
}

fn positive(field: &str, v: usize) -> Result<(), ConfigError> {
    if v == 0 {
        Err(field_err(field, "must be at least 1"))
    } else {
        Ok(())
    }
}

fn positive_real(field: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(field_err(
            field,
            format!("{v} must be a positive finite number"),
        ))
    }
}

fn non_negative(field: &str, v: f64) -> Result<(), ConfigError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(field_err(
            field,
            format!("{v} must be a non-negative finite number"),
        ))
    }
}

fn open_unit(field: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(field_err(
            field,
            format!("{v} must lie strictly between 0 and 1"),
        ))
    }
}

pub fn validate_gamma(field: &str, gamma: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(field_err(field, format!("{gamma} must lie in [0, 1]")))
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.dataset;
        if d.n_classes < 2 {
            return Err(field_err("dataset.n_classes", "must be at least 2"));
        }
        positive("dataset.n_per_class", d.n_per_class)?;
        positive("dataset.dim", d.dim)?;
        non_negative("dataset.separation", d.separation)?;
        if d.pretrain_classes == 0 || d.pretrain_classes >= d.n_classes {
            return Err(field_err(
                "dataset.pretrain_classes",
                format!("must lie in [1, {})", d.n_classes),
            ));
        }
        if d.overlap_classes > d.pretrain_classes {
            return Err(field_err(
                "dataset.overlap_classes",
                "cannot exceed dataset.pretrain_classes",
            ));
        }
        if !(0.0..1.0).contains(&d.server_frac) {
            return Err(field_err("dataset.server_frac", "must lie in [0, 1)"));
        }
        if let Some(i) = self.model.hidden.iter().position(|&h| h == 0) {
            return Err(field_err(
                &format!("model.hidden[{i}]"),
                "must be at least 1",
            ));
        }

        let p = &self.pretrain;
        positive("pretrain.clients", p.clients)?;
        positive("pretrain.participants", p.participants)?;
        if p.participants > p.clients {
            return Err(field_err(
                "pretrain.participants",
                "cannot exceed pretrain.clients",
            ));
        }
        positive("pretrain.local_iters", p.local_iters)?;
        positive("pretrain.batch_size", p.batch_size)?;
        positive_real("pretrain.local_lr", p.local_lr)?;
        non_negative("pretrain.meta_lr", p.meta_lr)?;
        validate_gamma("pretrain.gamma", p.gamma)?;
        non_negative("pretrain.q", p.q)?;
        positive_real("pretrain.alpha", p.alpha)?;
        open_unit("pretrain.support_frac", p.support_frac)?;
        non_negative("pretrain.fedmeta_outer_lr", p.fedmeta_outer_lr)?;
        for (i, a) in p.methods.iter().enumerate() {
            if p.methods[..i].contains(a) {
                return Err(field_err(
                    "pretrain.methods",
                    format!("{} listed twice", a.name()),
                ));
            }
        }
        let pooled = d.pretrain_classes * d.n_per_class;
        let n_server = (d.server_frac * pooled as f64).round() as usize;
        if 2 * p.clients > pooled - n_server {
            return Err(field_err(
                "pretrain.clients",
                format!(
                    "{} clients need two samples each but only {} are available",
                    p.clients,
                    pooled - n_server
                ),
            ));
        }
        for m in std::iter::once(p.method).chain(p.methods.iter().copied()) {
            if m.uses_server_data() && n_server == 0 {
                return Err(field_err(
                    "dataset.server_frac",
                    format!("method {} needs server data", m.name()),
                ));
            }
            if m == Method::CopreflS2 && n_server < p.participants {
                return Err(field_err(
                    "dataset.server_frac",
                    format!(
                        "coprefl_s2 needs at least {} server samples, got {n_server}",
                        p.participants
                    ),
                ));
            }
        }

        let ds = &self.downstream;
        let pool_classes = d.n_classes - d.pretrain_classes + d.overlap_classes;
        if ds.n_way == 0 || ds.n_way > pool_classes {
            return Err(field_err(
                "downstream.n_way",
                format!("must lie in [1, {pool_classes}] (downstream pool size)"),
            ));
        }
        positive("downstream.clients", ds.clients)?;
        positive("downstream.tasks", ds.tasks)?;
        positive("downstream.local_iters", ds.local_iters)?;
        positive("downstream.batch_size", ds.batch_size)?;
        positive_real("downstream.lr", ds.lr)?;
        non_negative("downstream.mu", ds.mu)?;
        non_negative("downstream.q", ds.q)?;
        positive_real("downstream.alpha", ds.alpha)?;
        open_unit("downstream.train_frac", ds.train_frac)?;
        // overlapping classes keep only half their samples downstream
        let min_per_class = if d.overlap_classes > 0 {
            d.n_per_class / 2
        } else {
            d.n_per_class
        };
        if 2 * ds.clients > ds.n_way * min_per_class {
            return Err(field_err(
                "downstream.clients",
                "too many clients for the samples of n_way classes",
            ));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec::new(
            self.dataset.dim,
            self.model.hidden.clone(),
            self.dataset.n_classes,
        )
        .expect("validated config")
    }

    pub fn pretrain_distribution(&self) -> Distribution {
        distribution(self.pretrain.distribution, self.pretrain.alpha)
    }

    pub fn round_config(&self) -> RoundConfig {
        RoundConfig {
            rounds: self.pretrain.rounds,
            participants_per_round: self.pretrain.participants,
            local_iters: self.pretrain.local_iters,
            local_lr: self.pretrain.local_lr,
            batch_size: self.pretrain.batch_size,
        }
    }

    pub fn balancer(&self) -> BalancerConfig {
        BalancerConfig {
            gamma: self.pretrain.gamma,
            meta_lr: self.pretrain.meta_lr,
        }
    }

    pub fn task_params(&self) -> TaskParams {
        TaskParams {
            n_way: self.downstream.n_way,
            n_clients: self.downstream.clients,
            distribution: distribution(self.downstream.distribution, self.downstream.alpha),
            train_frac: self.downstream.train_frac,
        }
    }

    pub fn algo_params(&self) -> AlgoParams {
        let ds = &self.downstream;
        AlgoParams {
            algorithm: match ds.algorithm {
                AlgorithmKind::Fedavg => DownstreamAlgorithm::FedAvg,
                AlgorithmKind::Fedprox => DownstreamAlgorithm::FedProx { mu: ds.mu },
                AlgorithmKind::Qffl => DownstreamAlgorithm::Qffl { q: ds.q },
            },
            rounds: ds.rounds,
            local_iters: ds.local_iters,
            lr: ds.lr,
            batch_size: ds.batch_size,
        }
    }
}

fn distribution(kind: DistributionKind, alpha: f64) -> Distribution {
    match kind {
        DistributionKind::Iid => Distribution::Iid,
        DistributionKind::Dirichlet => Distribution::Dirichlet { alpha },
    }
}
