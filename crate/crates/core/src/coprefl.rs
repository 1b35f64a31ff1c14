//! Meta-learned, fairness-balanced federated pre-training.
//!
//! Each round builds a temporary global model by FedAvg, evaluates it on a set
//! of held-out query sets (client query splits, or equal partitions of server
//! data), and takes one gradient step on the blended objective
//!
//! ```text
//! combined = gamma * sum_j L_j + (1 - gamma) * (1/m) * sum_j (L_j - mean)^2
//! ```
//!
//! where `mean = (sum_j L_j) / m`. The total is a sum while the variance is
//! centred on the mean; both are kept exactly as defined.
//!
//! Only the temporary global model is differentiated, never local training,
//! so the meta step needs nothing beyond per-set losses and gradients.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::ServerRefine;
use crate::data::{partition_equal, ClientShard, LabeledDataset};
use crate::error::{check_len, invalid, Result};
use crate::fl::{
    check_clients, ensure_finite, fedavg_aggregator, select_participants, train_participants,
    RoundConfig,
};
use crate::model::{self, GradientVector, ModelSpec, ParameterVector};
use crate::rng::{Purpose, RngPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalancerConfig {
    pub gamma: f64,
    pub meta_lr: f64,
}

impl Default for BalancerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            meta_lr: 1e-3,
        }
    }
}

impl BalancerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(invalid(format!("gamma {} must lie in [0, 1]", self.gamma)));
        }
        if !(self.meta_lr >= 0.0 && self.meta_lr.is_finite()) {
            return Err(invalid("meta_lr must be a non-negative finite number"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaLossReport {
    pub per_client_losses: Vec<f64>,
    /// Sum of the per-client losses.
    pub total: f64,
    pub mean: f64,
    /// Population variance of the per-client losses.
    pub variance: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainResult {
    pub final_params: ParameterVector,
    pub history: Vec<MetaLossReport>,
}

impl PretrainResult {
    /// `round,total,mean,variance,combined`, rounds numbered from 1.
    pub fn write_history_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "round,total,mean,variance,combined")?;
        for (i, r) in self.history.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{}",
                i + 1,
                r.total,
                r.mean,
                r.variance,
                r.combined
            )?;
        }
        Ok(())
    }
}

/// Loss and gradient of `temp_global` on every query set, in input order.
pub fn query_evaluate(
    temp_global: &ParameterVector,
    spec: &ModelSpec,
    query_sets: &[LabeledDataset],
) -> Result<(Vec<f64>, Vec<GradientVector>)> {
    if query_sets.is_empty() {
        return Err(invalid("at least one query set is required"));
    }
    if let Some(j) = query_sets.iter().position(LabeledDataset::is_empty) {
        return Err(invalid(format!("query set {j} is empty")));
    }
    let pairs = query_sets
        .par_iter()
        .map(|q| model::loss_and_gradient(temp_global, spec, &q.batch()?))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairs.into_iter().unzip())
}

pub fn meta_loss(losses: &[f64], gamma: f64) -> Result<MetaLossReport> {
    if losses.is_empty() {
        return Err(invalid("meta loss needs at least one participant"));
    }
    let m = losses.len() as f64;
    let total: f64 = losses.iter().sum();
    // running mean keeps equal losses exactly equal to their mean
    let mean = losses
        .iter()
        .enumerate()
        .fold(0.0, |acc, (k, l)| acc + (l - acc) / (k + 1) as f64);
    let variance = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / m;
    Ok(MetaLossReport {
        per_client_losses: losses.to_vec(),
        total,
        mean,
        variance,
        combined: gamma * total + (1.0 - gamma) * variance,
    })
}

/// Exact gradient of [`MetaLossReport::combined`] at the shared parameter
/// point, given each participant's loss and loss gradient there:
/// `sum_j (gamma + (1 - gamma) * (2/m) * (L_j - mean)) * grad_j`.
///
/// The derivative of the mean inside the variance drops out because the
/// centred losses sum to zero.
pub fn meta_gradient(
    losses: &[f64],
    grads: &[GradientVector],
    gamma: f64,
) -> Result<GradientVector> {
    check_len(losses.len(), grads.len())?;
    let report = meta_loss(losses, gamma)?;
    let len = grads[0].len();
    let m = losses.len() as f64;
    let mut out = vec![0.0; len];
    for (l, g) in losses.iter().zip(grads) {
        check_len(len, g.len())?;
        let coeff = gamma + (1.0 - gamma) * (2.0 / m) * (l - report.mean);
        for (o, v) in out.iter_mut().zip(g.as_slice()) {
            *o += coeff * v;
        }
    }
    Ok(GradientVector::from(out))
}

/// One gradient step of size `zeta` on the temporary global model.
pub fn meta_update(
    temp_global: &ParameterVector,
    meta_grad: &GradientVector,
    zeta: f64,
) -> Result<ParameterVector> {
    model::sgd_step(temp_global, meta_grad, zeta)
}

fn meta_step(
    temp: &ParameterVector,
    spec: &ModelSpec,
    query_sets: &[LabeledDataset],
    bal: &BalancerConfig,
) -> Result<(ParameterVector, MetaLossReport)> {
    let (losses, grads) = query_evaluate(temp, spec, query_sets)?;
    let report = meta_loss(&losses, bal.gamma)?;
    let grad = meta_gradient(&losses, &grads, bal.gamma)?;
    Ok((meta_update(temp, &grad, bal.meta_lr)?, report))
}

fn scenario1_loop(
    init: &ParameterVector,
    spec: &ModelSpec,
    shards: &[ClientShard],
    cfg: &RoundConfig,
    bal: &BalancerConfig,
    refine: Option<&ServerRefine<'_>>,
    policy: &RngPolicy,
) -> Result<PretrainResult> {
    bal.validate()?;
    let mut support = Vec::with_capacity(shards.len());
    let mut query = Vec::with_capacity(shards.len());
    for s in shards {
        if s.support.is_empty() || s.query.is_empty() {
            return Err(invalid(format!(
                "client {} needs non-empty support and query sets",
                s.client_id
            )));
        }
        support.push(s.support_set());
        query.push(s.query_set());
    }
    check_clients(spec, &support)?;
    check_len(spec.parameter_count(), init.len())?;
    cfg.validate(shards.len())?;

    let mut global = init.clone();
    let mut history = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let participants =
            select_participants(shards.len(), cfg.participants_per_round, round, policy)?;
        let outcomes = train_participants(
            &global,
            spec,
            &participants,
            &support,
            cfg,
            policy,
            round,
            None,
        )?;
        let temp = fedavg_aggregator(&global, &outcomes)?;
        let query_sets: Vec<LabeledDataset> =
            participants.iter().map(|&id| query[id].clone()).collect();
        let (next, report) = meta_step(&temp, spec, &query_sets, bal)?;
        global = match refine {
            Some(r) => r.apply(next, spec, policy, round)?,
            None => next,
        };
        ensure_finite(&global, round)?;
        history.push(report);
    }
    Ok(PretrainResult {
        final_params: global,
        history,
    })
}

/// Pre-training with client-held data only. Local training uses each
/// participant's support set; the meta step uses their query sets.
pub fn pretrain_scenario1(
    init: &ParameterVector,
    spec: &ModelSpec,
    shards: &[ClientShard],
    cfg: &RoundConfig,
    bal: &BalancerConfig,
    policy: &RngPolicy,
) -> Result<PretrainResult> {
    scenario1_loop(init, spec, shards, cfg, bal, None, policy)
}

/// Pre-training with a small server dataset. Clients train on their full
/// data; each round the server data is re-split into `m` equal parts that act
/// as the query sets.
pub fn pretrain_scenario2(
    init: &ParameterVector,
    spec: &ModelSpec,
    clients: &[LabeledDataset],
    server_data: &LabeledDataset,
    cfg: &RoundConfig,
    bal: &BalancerConfig,
    policy: &RngPolicy,
) -> Result<PretrainResult> {
    bal.validate()?;
    check_clients(spec, clients)?;
    check_len(spec.parameter_count(), init.len())?;
    cfg.validate(clients.len())?;
    if server_data.len() < cfg.participants_per_round {
        return Err(invalid(format!(
            "server data has {} samples but {} partitions are needed",
            server_data.len(),
            cfg.participants_per_round
        )));
    }
    check_len(spec.input_dim, server_data.dim())?;

    let mut global = init.clone();
    let mut history = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let participants =
            select_participants(clients.len(), cfg.participants_per_round, round, policy)?;
        let outcomes = train_participants(
            &global,
            spec,
            &participants,
            clients,
            cfg,
            policy,
            round,
            None,
        )?;
        let temp = fedavg_aggregator(&global, &outcomes)?;
        let partitions = partition_equal(
            server_data,
            cfg.participants_per_round,
            policy.seed(Purpose::ServerPartition, round as u64, 0),
        )?;
        let (next, report) = meta_step(&temp, spec, &partitions, bal)?;
        global = next;
        ensure_finite(&global, round)?;
        history.push(report);
    }
    Ok(PretrainResult {
        final_params: global,
        history,
    })
}

/// Scenario-I rounds followed, each round, by `refine_iters` SGD steps on
/// server data before the model is broadcast.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_coprefl_sgd(
    init: &ParameterVector,
    spec: &ModelSpec,
    shards: &[ClientShard],
    server_data: &LabeledDataset,
    cfg: &RoundConfig,
    bal: &BalancerConfig,
    refine_iters: usize,
    policy: &RngPolicy,
) -> Result<PretrainResult> {
    if server_data.is_empty() {
        return Err(invalid("server data must be non-empty"));
    }
    let refine = ServerRefine {
        data: server_data,
        iters: refine_iters,
        lr: cfg.local_lr,
        batch_size: cfg.batch_size,
    };
    scenario1_loop(init, spec, shards, cfg, bal, Some(&refine), policy)
}
