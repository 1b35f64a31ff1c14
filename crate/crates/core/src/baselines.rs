//! Pre-training baselines and alternative local-update rules.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, LabeledDataset};
use crate::error::{check_len, invalid, Result};
use crate::fl::{
    self, ensure_finite, fedavg_aggregator, federated_loop, minibatch_sgd, select_participants,
    ClientUpdate, LocalOutcome, RoundConfig,
};
use crate::model::{self, Batch, GradientVector, ModelSpec, ParameterVector};
use crate::rng::{Purpose, RngPolicy, StreamRng};

/// Added to client losses before raising them to the power `q`.
pub const QFFL_EPSILON: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QfflConfig {
    pub q: f64,
}

impl Default for QfflConfig {
    fn default() -> Self {
        Self { q: 1.0 }
    }
}

impl QfflConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q >= 0.0 && self.q.is_finite() {
            Ok(())
        } else {
            Err(invalid("q must be a non-negative finite number"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FedProxConfig {
    pub mu: f64,
}

impl Default for FedProxConfig {
    fn default() -> Self {
        Self { mu: 1.0 }
    }
}

impl FedProxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mu >= 0.0 && self.mu.is_finite() {
            Ok(())
        } else {
            Err(invalid("mu must be a non-negative finite number"))
        }
    }
}

/// Per-round SGD on server-held data, applied to the aggregated model.
#[derive(Debug, Clone, Copy)]
pub struct ServerRefine<'a> {
    pub data: &'a LabeledDataset,
    pub iters: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl ServerRefine<'_> {
    pub(crate) fn apply(
        &self,
        global: ParameterVector,
        spec: &ModelSpec,
        policy: &RngPolicy,
        round: usize,
    ) -> Result<ParameterVector> {
        if self.iters == 0 {
            return Ok(global);
        }
        let mut rng = policy.stream(Purpose::ServerRefine, round as u64, 0);
        server_refine(
            &global,
            spec,
            self.data,
            self.iters,
            self.lr,
            self.batch_size,
            &mut rng,
        )
    }
}

pub(crate) fn add_proximal_pull(
    grad: &mut GradientVector,
    params: &ParameterVector,
    anchor: &ParameterVector,
    mu: f64,
) {
    if mu == 0.0 {
        return;
    }
    for ((g, p), a) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(params.as_slice())
        .zip(anchor.as_slice())
    {
        *g += mu * (p - a);
    }
}

/// Loss plus `(mu / 2) * ||params - anchor||^2`, with its gradient.
pub fn proximal_loss_and_gradient(
    params: &ParameterVector,
    anchor: &ParameterVector,
    spec: &ModelSpec,
    batch: &Batch<'_>,
    mu: f64,
) -> Result<(f64, GradientVector)> {
    check_len(params.len(), anchor.len())?;
    let (loss, mut grad) = model::loss_and_gradient(params, spec, batch)?;
    let sq = params.distance(anchor).powi(2);
    add_proximal_pull(&mut grad, params, anchor, mu);
    Ok((loss + 0.5 * mu * sq, grad))
}

/// FedAvg pre-training; the same computation as [`fl::run_fedavg`].
pub fn pretrain_fedavg(
    init: &ParameterVector,
    spec: &ModelSpec,
    clients: &[LabeledDataset],
    cfg: &RoundConfig,
    policy: &RngPolicy,
) -> Result<ParameterVector> {
    fl::run_fedavg(init, spec, clients, cfg, policy)
}

/// FedAvg with per-round server refinement (the hybrid baseline).
pub fn pretrain_fedavg_refined(
    init: &ParameterVector,
    spec: &ModelSpec,
    clients: &[LabeledDataset],
    cfg: &RoundConfig,
    refine: &ServerRefine<'_>,
    policy: &RngPolicy,
) -> Result<ParameterVector> {
    federated_loop(
        init,
        spec,
        clients,
        cfg,
        policy,
        None,
        &fedavg_aggregator,
        &|round, p| refine.apply(p, spec, policy, round),
        &mut |_| {},
    )
}

fn split_shards(shards: &[ClientShard]) -> Result<(Vec<LabeledDataset>, Vec<LabeledDataset>)> {
    if shards.is_empty() {
        return Err(invalid("at least one client shard is required"));
    }
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
    Ok((support, query))
}

/// First-order FedMeta. Each participant adapts on its support set with
/// `inner_lr`, then takes one step of size `outer_lr` along its query-set
/// gradient evaluated at the adapted model. The server averages the results
/// weighted by support-set size.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_fedmeta(
    init: &ParameterVector,
    spec: &ModelSpec,
    shards: &[ClientShard],
    cfg: &RoundConfig,
    inner_lr: f64,
    outer_lr: f64,
    policy: &RngPolicy,
) -> Result<ParameterVector> {
    fedmeta_loop(init, spec, shards, cfg, inner_lr, outer_lr, None, policy)
}

#[allow(clippy::too_many_arguments)]
pub fn pretrain_fedmeta_refined(
    init: &ParameterVector,
    spec: &ModelSpec,
    shards: &[ClientShard],
    cfg: &RoundConfig,
    inner_lr: f64,
    outer_lr: f64,
    refine: &ServerRefine<'_>,
    policy: &RngPolicy,
) -> Result<ParameterVector> {
    fedmeta_loop(
        init,
        spec,
        shards,
        cfg,
        inner_lr,
        outer_lr,
        Some(refine),
        policy,
    )
}

#[allow(clippy::too_many_arguments)]
fn fedmeta_loop(
    init: &ParameterVector,
    spec: &ModelSpec,
    shards: &[ClientShard],
    cfg: &RoundConfig,
    inner_lr: f64,
    outer_lr: f64,
    refine: Option<&ServerRefine<'_>>,
    policy: &RngPolicy,
) -> Result<ParameterVector> {
    if !(inner_lr >= 0.0 && outer_lr >= 0.0) {
        return Err(invalid("FedMeta learning rates must be non-negative"));
    }
    let (support, query) = split_shards(shards)?;
    check_len(spec.parameter_count(), init.len())?;
    cfg.validate(shards.len())?;
    let mut global = init.clone();
    for round in 1..=cfg.rounds {
        let participants =
            select_participants(shards.len(), cfg.participants_per_round, round, policy)?;
        let updates = participants
            .par_iter()
            .map(|&id| {
                let mut rng = policy.stream(Purpose::LocalTrain, round as u64, id as u64);
                let adapted = minibatch_sgd(
                    &global,
                    spec,
                    &support[id],
                    cfg.local_iters,
                    inner_lr,
                    cfg.batch_size,
                    &mut rng,
                    None,
                )?;
                let query_grad = model::gradient(&adapted, spec, &query[id].batch()?)?;
                Ok(ClientUpdate {
                    client_id: id,
                    params: model::sgd_step(&adapted, &query_grad, outer_lr)?,
                    n_samples: support[id].len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        global = fl::aggregate(&updates)?;
        if let Some(r) = refine {
            global = r.apply(global, spec, policy, round)?;
        }
        ensure_finite(&global, round)?;
    }
    Ok(global)
}

/// Loss-power reweighted aggregation: with `delta_j = params_j - base` and
/// `w_j = n_j * (loss_j + eps)^q`, returns `base + sum_j w_j delta_j / sum_j w_j`.
///
/// The base cancels algebraically, so the result is evaluated as the
/// `w`-weighted mean of the client models. At `q = 0` the weights are exactly
/// the sample counts and the output matches [`fl::aggregate`] bit for bit.
pub fn qffl_aggregate(
    updates: &[ClientUpdate],
    per_client_train_loss: &[f64],
    q: f64,
    base: &ParameterVector,
) -> Result<ParameterVector> {
    check_len(updates.len(), per_client_train_loss.len())?;
    QfflConfig { q }.validate()?;
    if let Some(bad) = per_client_train_loss
        .iter()
        .find(|l| !(**l >= 0.0 && l.is_finite()))
    {
        return Err(invalid(format!(
            "client loss {bad} must be non-negative and finite"
        )));
    }
    for u in updates {
        check_len(base.len(), u.params.len())?;
        if u.n_samples == 0 {
            return Err(invalid("client updates must carry at least one sample"));
        }
    }
    let items: Vec<(&ParameterVector, f64)> = updates
        .iter()
        .zip(per_client_train_loss)
        .map(|(u, &l)| (&u.params, u.n_samples as f64 * (l + QFFL_EPSILON).powf(q)))
        .collect();
    fl::weighted_average(&items)
}

fn qffl_aggregator(
    q: f64,
) -> impl Fn(&ParameterVector, &[LocalOutcome]) -> Result<ParameterVector> + Sync {
    move |base, outcomes| {
        let updates: Vec<ClientUpdate> = outcomes.iter().map(LocalOutcome::to_update).collect();
        let losses: Vec<f64> = outcomes.iter().map(|o| o.train_loss).collect();
        qffl_aggregate(&updates, &losses, q, base)
    }
}

/// FedAvg loop with [`qffl_aggregate`] in place of plain averaging; each
/// participant's weight uses its post-training local loss.
pub fn pretrain_qffl(
    init: &ParameterVector,
    spec: &ModelSpec,
    clients: &[LabeledDataset],
    cfg: &RoundConfig,
    qcfg: &QfflConfig,
    policy: &RngPolicy,
) -> Result<ParameterVector> {
    qcfg.validate()?;
    federated_loop(
        init,
        spec,
        clients,
        cfg,
        policy,
        None,
        &qffl_aggregator(qcfg.q),
        &|_, p| Ok(p),
        &mut |_| {},
    )
}

pub fn pretrain_qffl_refined(
    init: &ParameterVector,
    spec: &ModelSpec,
    clients: &[LabeledDataset],
    cfg: &RoundConfig,
    qcfg: &QfflConfig,
    refine: &ServerRefine<'_>,
    policy: &RngPolicy,
) -> Result<ParameterVector> {
    qcfg.validate()?;
    federated_loop(
        init,
        spec,
        clients,
        cfg,
        policy,
        None,
        &qffl_aggregator(qcfg.q),
        &|round, p| refine.apply(p, spec, policy, round),
        &mut |_| {},
    )
}

/// Number of minibatches that make up one pass over `n` samples.
pub fn iters_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.clamp(1, n.max(1)))
}

/// Plain minibatch SGD on pooled data. Each epoch reshuffles and runs
/// `ceil(n / batch_size)` steps, drawing from the same streams a one-client
/// FedAvg run with `rounds = epochs` would use.
pub fn pretrain_centralized(
    init: &ParameterVector,
    spec: &ModelSpec,
    pooled: &LabeledDataset,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<ParameterVector> {
    if pooled.is_empty() {
        return Err(invalid("centralized training needs a non-empty dataset"));
    }
    let policy = RngPolicy::new(seed);
    let iters = iters_per_epoch(pooled.len(), batch_size);
    let mut params = init.clone();
    for epoch in 1..=epochs {
        let mut rng = policy.stream(Purpose::LocalTrain, epoch as u64, 0);
        params = minibatch_sgd(&params, spec, pooled, iters, lr, batch_size, &mut rng, None)?;
        ensure_finite(&params, epoch)?;
    }
    Ok(params)
}

/// `iters` minibatch SGD steps on server data.
pub fn server_refine(
    global: &ParameterVector,
    spec: &ModelSpec,
    server_data: &LabeledDataset,
    iters: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut StreamRng,
) -> Result<ParameterVector> {
    if server_data.is_empty() {
        return Err(invalid("server refinement needs non-empty server data"));
    }
    minibatch_sgd(global, spec, server_data, iters, lr, batch_size, rng, None)
}

/// Local SGD on `loss + (mu / 2) * ||theta - anchor||^2`.
#[allow(clippy::too_many_arguments)]
pub fn fedprox_local_train(
    start: &ParameterVector,
    anchor: &ParameterVector,
    spec: &ModelSpec,
    data: &LabeledDataset,
    iters: usize,
    lr: f64,
    mu: f64,
    batch_size: usize,
    rng: &mut StreamRng,
) -> Result<ParameterVector> {
    FedProxConfig { mu }.validate()?;
    minibatch_sgd(
        start,
        spec,
        data,
        iters,
        lr,
        batch_size,
        rng,
        Some((anchor, mu)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Distribution;
    use crate::data::{synth_dataset, FederatedDataset};
    use crate::model::init_params;
    use crate::rng::rng_from_seed;

    fn pv(v: &[f64]) -> ParameterVector {
        ParameterVector::from(v.to_vec())
    }

    fn update(v: &[f64], n: usize) -> ClientUpdate {
        ClientUpdate {
            client_id: 0,
            params: pv(v),
            n_samples: n,
        }
    }

    #[test]
    fn qffl_hand_example() {
        let base = pv(&[1.0]);
        let ups = [update(&[1.0], 4), update(&[4.0], 4)];
        let out = qffl_aggregate(&ups, &[1.0, 2.0], 1.0, &base).unwrap();
        assert!((out[0] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn qffl_q_zero_is_fedavg() {
        let ups = [
            update(&[0.3, -1.0], 3),
            update(&[2.0, 0.7], 5),
            update(&[-0.1, 0.2], 1),
        ];
        let base = pv(&[0.0, 0.0]);
        let out = qffl_aggregate(&ups, &[0.4, 2.2, 0.9], 0.0, &base).unwrap();
        assert_eq!(out, fl::aggregate(&ups).unwrap());
    }

    #[test]
    fn qffl_equal_losses_match_fedavg() {
        let ups = [update(&[0.3, -1.0], 3), update(&[2.0, 0.7], 5)];
        let base = pv(&[0.1, 0.1]);
        let plain = fl::aggregate(&ups).unwrap();
        for q in [0.5, 1.0, 3.0, 5.0] {
            let out = qffl_aggregate(&ups, &[0.8, 0.8], q, &base).unwrap();
            for (a, b) in out.as_slice().iter().zip(plain.as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn qffl_errors() {
        let ups = [update(&[1.0], 1)];
        let base = pv(&[0.0]);
        assert!(qffl_aggregate(&ups, &[], 1.0, &base).is_err());
        assert!(qffl_aggregate(&ups, &[-1.0], 1.0, &base).is_err());
        assert!(qffl_aggregate(&ups, &[1.0], -1.0, &base).is_err());
        assert!(qffl_aggregate(&ups, &[1.0], 1.0, &pv(&[0.0, 0.0])).is_err());
    }

    fn toy() -> (ModelSpec, LabeledDataset, ParameterVector) {
        let spec = ModelSpec::new(3, vec![5], 3).unwrap();
        (
            spec.clone(),
            synth_dataset(3, 30, 3, 2.5, 8).unwrap(),
            init_params(&spec, 1),
        )
    }

    #[test]
    fn fedprox_mu_zero_is_local_train() {
        let (spec, data, init) = toy();
        let anchor = init_params(&spec, 99);
        let a = fedprox_local_train(
            &init,
            &anchor,
            &spec,
            &data,
            7,
            0.05,
            0.0,
            16,
            &mut rng_from_seed(3),
        )
        .unwrap();
        let b = fl::local_train(&init, &spec, &data, 7, 0.05, 16, &mut rng_from_seed(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fedprox_large_mu_pulls_to_anchor() {
        let (spec, data, init) = toy();
        let anchor = init_params(&spec, 99);
        let before = init.distance(&anchor);
        let out = fedprox_local_train(
            &init,
            &anchor,
            &spec,
            &data,
            5,
            1e-7,
            1e6,
            16,
            &mut rng_from_seed(3),
        )
        .unwrap();
        assert!(out.distance(&anchor) < before);
    }

    #[test]
    fn server_refine_trivial_cases() {
        let (spec, data, init) = toy();
        let mut rng = rng_from_seed(0);
        assert_eq!(
            server_refine(&init, &spec, &data, 0, 0.1, 8, &mut rng).unwrap(),
            init
        );
        assert_eq!(
            server_refine(&init, &spec, &data, 3, 0.0, 8, &mut rng).unwrap(),
            init
        );
        let one = server_refine(&init, &spec, &data, 1, 0.1, data.len(), &mut rng).unwrap();
        let g = model::gradient(&init, &spec, &data.batch().unwrap()).unwrap();
        assert_eq!(one, model::sgd_step(&init, &g, 0.1).unwrap());
        assert!(
            server_refine(&init, &spec, &LabeledDataset::empty(3), 1, 0.1, 8, &mut rng).is_err()
        );
    }

    #[test]
    fn centralized_matches_single_client_fedavg() {
        let (spec, data, init) = toy();
        let epochs = 4;
        let central = pretrain_centralized(&init, &spec, &data, epochs, 0.05, 16, 21).unwrap();
        let cfg = RoundConfig {
            rounds: epochs,
            participants_per_round: 1,
            local_iters: iters_per_epoch(data.len(), 16),
            local_lr: 0.05,
            batch_size: 16,
        };
        let fedavg = fl::run_fedavg(
            &init,
            &spec,
            std::slice::from_ref(&data),
            &cfg,
            &RngPolicy::new(21),
        )
        .unwrap();
        assert_eq!(central, fedavg);
        assert_eq!(
            pretrain_centralized(&init, &spec, &data, 0, 0.05, 16, 21).unwrap(),
            init
        );
    }

    #[test]
    fn centralized_loss_decreases_per_epoch() {
        let spec = ModelSpec::logistic(4, 2).unwrap();
        let data = synth_dataset(2, 100, 4, 5.0, 2).unwrap();
        let init = init_params(&spec, 0);
        let batch = data.batch().unwrap();
        let mut prev = model::loss(&init, &spec, &batch).unwrap();
        let first = prev;
        for epochs in 1..=6 {
            let p = pretrain_centralized(&init, &spec, &data, epochs, 0.05, 32, 4).unwrap();
            let l = model::loss(&p, &spec, &batch).unwrap();
            assert!(l <= prev + 1e-12, "epoch {epochs}: {l} > {prev}");
            prev = l;
        }
        assert!(prev < first);
    }

    #[test]
    fn fedmeta_single_client_one_round_composition() {
        let (spec, data, init) = toy();
        let shard = crate::data::support_query_split(data, 0.8, 5, 0).unwrap();
        let cfg = RoundConfig {
            rounds: 1,
            participants_per_round: 1,
            local_iters: 3,
            local_lr: 0.05,
            batch_size: 8,
        };
        let policy = RngPolicy::new(13);
        let out = pretrain_fedmeta(
            &init,
            &spec,
            std::slice::from_ref(&shard),
            &cfg,
            0.05,
            0.2,
            &policy,
        )
        .unwrap();
        let mut rng = policy.stream(Purpose::LocalTrain, 1, 0);
        let adapted =
            fl::local_train(&init, &spec, &shard.support_set(), 3, 0.05, 8, &mut rng).unwrap();
        let g = model::gradient(&adapted, &spec, &shard.query_set().batch().unwrap()).unwrap();
        assert_eq!(out, model::sgd_step(&adapted, &g, 0.2).unwrap());
    }

    #[test]
    fn baselines_are_deterministic() {
        let (spec, data, init) = toy();
        let fed = FederatedDataset::build(
            &data,
            4,
            Distribution::Dirichlet { alpha: 0.5 },
            0.8,
            0.1,
            2,
        )
        .unwrap();
        let clients = fed.client_datasets();
        let cfg = RoundConfig {
            rounds: 2,
            participants_per_round: 2,
            local_lr: 0.05,
            ..RoundConfig::default()
        };
        let policy = RngPolicy::new(8);
        let q = QfflConfig { q: 3.0 };
        let a = pretrain_qffl(&init, &spec, &clients, &cfg, &q, &policy).unwrap();
        assert_eq!(
            a,
            pretrain_qffl(&init, &spec, &clients, &cfg, &q, &policy).unwrap()
        );
        assert!(a.is_finite());
        let m1 = pretrain_fedmeta(&init, &spec, &fed.clients, &cfg, 0.05, 0.05, &policy).unwrap();
        assert_eq!(
            m1,
            pretrain_fedmeta(&init, &spec, &fed.clients, &cfg, 0.05, 0.05, &policy).unwrap()
        );
        let refine = ServerRefine {
            data: &fed.server_data,
            iters: 5,
            lr: 0.05,
            batch_size: 32,
        };
        let h = pretrain_fedavg_refined(&init, &spec, &clients, &cfg, &refine, &policy).unwrap();
        assert_ne!(
            h,
            pretrain_fedavg(&init, &spec, &clients, &cfg, &policy).unwrap()
        );
    }
}
