//! Synchronous round-based federated training.
//!
//! Within a round every participant starts from the same broadcast model and
//! trains independently (in parallel through rayon). Aggregation is the
//! barrier. Each participant draws from its own `(round, client)` stream, and
//! all reductions run in ascending client order, so results do not depend on
//! the thread count.

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::add_proximal_pull;
use crate::data::LabeledDataset;
use crate::error::{check_len, invalid, Error, Result};
use crate::model::{self, ModelSpec, ParameterVector};
use crate::rng::{Purpose, RngPolicy, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub rounds: usize,
    pub participants_per_round: usize,
    pub local_iters: usize,
    pub local_lr: f64,
    pub batch_size: usize,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            participants_per_round: 20,
            local_iters: 5,
            local_lr: 1e-3,
            batch_size: 32,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self, n_clients: usize) -> Result<()> {
        if self.participants_per_round == 0 {
            return Err(invalid("participants_per_round must be at least 1"));
        }
        if self.participants_per_round > n_clients {
            return Err(invalid(format!(
                "participants_per_round {} exceeds the {n_clients} available clients",
                self.participants_per_round
            )));
        }
        if self.local_iters == 0 {
            return Err(invalid("local_iters must be positive"));
        }
        if !(self.local_lr > 0.0 && self.local_lr.is_finite()) {
            return Err(invalid("local_lr must be a positive finite number"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParameterVector,
    pub n_samples: usize,
}

/// One participant's result for a round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub client_id: usize,
    pub params: ParameterVector,
    pub n_samples: usize,
    /// Loss of the trained local model on the data it trained on.
    pub train_loss: f64,
}

impl LocalOutcome {
    pub fn to_update(&self) -> ClientUpdate {
        ClientUpdate {
            client_id: self.client_id,
            params: self.params.clone(),
            n_samples: self.n_samples,
        }
    }
}

/// Per-round summary handed to observers.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTelemetry {
    pub round: usize,
    pub participants: Vec<usize>,
    pub mean_client_loss: f64,
}

/// Uniformly samples `m` distinct clients for `round`, returned ascending.
pub fn select_participants(
    n_clients: usize,
    m: usize,
    round: usize,
    policy: &RngPolicy,
) -> Result<Vec<usize>> {
    if m > n_clients {
        return Err(invalid(format!("cannot select {m} of {n_clients} clients")));
    }
    let mut rng = policy.stream(Purpose::Selection, round as u64, 0);
    let mut ids = index::sample(&mut rng, n_clients, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Minibatch SGD, optionally with a proximal pull `mu * (theta - anchor)`
/// toward an anchor model.
///
/// The sample order is shuffled once per call; consecutive windows of
/// `min(batch_size, n)` indices form the minibatches, wrapping around when
/// `iters * batch_size > n`. Indices inside a minibatch are visited in
/// ascending order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn minibatch_sgd(
    start: &ParameterVector,
    spec: &ModelSpec,
    data: &LabeledDataset,
    iters: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut StreamRng,
    proximal: Option<(&ParameterVector, f64)>,
) -> Result<ParameterVector> {
    let n = data.len();
    if n == 0 {
        return Err(invalid("local training needs a non-empty dataset"));
    }
    check_len(spec.parameter_count(), start.len())?;
    if let Some((anchor, _)) = proximal {
        check_len(start.len(), anchor.len())?;
    }
    if iters == 0 || lr == 0.0 {
        return Ok(start.clone());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let b = batch_size.clamp(1, n);
    let dim = data.dim();
    let mut window = Vec::with_capacity(b);
    let mut features = Vec::with_capacity(b * dim);
    let mut labels = Vec::with_capacity(b);
    let mut params = start.clone();

    for it in 0..iters {
        window.clear();
        window.extend((0..b).map(|k| order[(it * b + k) % n]));
        window.sort_unstable();
        features.clear();
        labels.clear();
        for &i in &window {
            features.extend_from_slice(data.row(i));
            labels.push(data.labels()[i]);
        }
        let batch = model::Batch::new(&features, &labels, dim)?;
        let mut grad = model::gradient(&params, spec, &batch)?;
        if let Some((anchor, mu)) = proximal {
            add_proximal_pull(&mut grad, &params, anchor, mu);
        }
        params = model::sgd_step(&params, &grad, lr)?;
    }
    Ok(params)
}

/// `iters` minibatch SGD steps from `start` on `data`.
pub fn local_train(
    start: &ParameterVector,
    spec: &ModelSpec,
    data: &LabeledDataset,
    iters: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut StreamRng,
) -> Result<ParameterVector> {
    minibatch_sgd(start, spec, data, iters, lr, batch_size, rng, None)
}

/// Weighted mean of parameter vectors, computed as a running mean in input
/// order. Identical inputs are reproduced exactly.
pub fn weighted_average(items: &[(&ParameterVector, f64)]) -> Result<ParameterVector> {
    let (first, rest) = items
        .split_first()
        .ok_or_else(|| invalid("cannot aggregate an empty set of updates"))?;
    for (p, w) in items {
        check_len(first.0.len(), p.len())?;
        if !(*w > 0.0 && w.is_finite()) {
            return Err(invalid(format!(
                "aggregation weight {w} must be positive and finite"
            )));
        }
    }
    let mut out = first.0.clone();
    let mut total = first.1;
    for (p, w) in rest {
        total += w;
        let t = w / total;
        for (o, v) in out.as_mut_slice().iter_mut().zip(p.as_slice()) {
            *o += t * (v - *o);
        }
    }
    Ok(out)
}

/// Sample-weighted FedAvg aggregation.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<ParameterVector> {
    if updates.iter().any(|u| u.n_samples == 0) {
        return Err(invalid("client updates must carry at least one sample"));
    }
    let items: Vec<(&ParameterVector, f64)> = updates
        .iter()
        .map(|u| (&u.params, u.n_samples as f64))
        .collect();
    weighted_average(&items)
}

/// Trains every participant from `global` on its own dataset, in parallel.
/// Outcomes come back in participant order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn train_participants(
    global: &ParameterVector,
    spec: &ModelSpec,
    participants: &[usize],
    datasets: &[LabeledDataset],
    cfg: &RoundConfig,
    policy: &RngPolicy,
    round: usize,
    proximal_mu: Option<f64>,
) -> Result<Vec<LocalOutcome>> {
    participants
        .par_iter()
        .map(|&id| {
            let data = &datasets[id];
            let mut rng = policy.stream(Purpose::LocalTrain, round as u64, id as u64);
            let anchor = proximal_mu.map(|mu| (global, mu));
            let params = minibatch_sgd(
                global,
                spec,
                data,
                cfg.local_iters,
                cfg.local_lr,
                cfg.batch_size,
                &mut rng,
                anchor,
            )?;
            let train_loss = model::loss(&params, spec, &data.batch()?)?;
            Ok(LocalOutcome {
                client_id: id,
                params,
                n_samples: data.len(),
                train_loss,
            })
        })
        .collect()
}

pub(crate) fn mean_loss(outcomes: &[LocalOutcome]) -> f64 {
    outcomes.iter().map(|o| o.train_loss).sum::<f64>() / outcomes.len().max(1) as f64
}

pub(crate) fn ensure_finite(params: &ParameterVector, round: usize) -> Result<()> {
    if params.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("round {round}")))
    }
}

pub(crate) fn check_clients(spec: &ModelSpec, clients: &[LabeledDataset]) -> Result<()> {
    if clients.is_empty() {
        return Err(invalid("at least one client is required"));
    }
    for (id, c) in clients.iter().enumerate() {
        if c.is_empty() {
            return Err(invalid(format!("client {id} holds no data")));
        }
        check_len(spec.input_dim, c.dim())?;
    }
    Ok(())
}

/// How a round's local outcomes become the next global model.
pub(crate) type Aggregator<'a> =
    dyn Fn(&ParameterVector, &[LocalOutcome]) -> Result<ParameterVector> + Sync + 'a;

/// Applied to the aggregated model before it is broadcast.
pub(crate) type PostRound<'a> =
    dyn Fn(usize, ParameterVector) -> Result<ParameterVector> + Sync + 'a;

pub(crate) fn fedavg_aggregator(
    _: &ParameterVector,
    outcomes: &[LocalOutcome],
) -> Result<ParameterVector> {
    let updates: Vec<ClientUpdate> = outcomes.iter().map(LocalOutcome::to_update).collect();
    aggregate(&updates)
}

/// Generic FedAvg-shaped loop: select, train locally, aggregate, post-process.
#[allow(clippy::too_many_arguments)]
pub(crate) fn federated_loop(
    init: &ParameterVector,
    spec: &ModelSpec,
    clients: &[LabeledDataset],
    cfg: &RoundConfig,
    policy: &RngPolicy,
    proximal_mu: Option<f64>,
    aggregator: &Aggregator<'_>,
    post_round: &PostRound<'_>,
    observer: &mut dyn FnMut(&RoundTelemetry),
) -> Result<ParameterVector> {
    check_clients(spec, clients)?;
    check_len(spec.parameter_count(), init.len())?;
    cfg.validate(clients.len())?;
    let mut global = init.clone();
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
            proximal_mu,
        )?;
        let aggregated = aggregator(&global, &outcomes)?;
        global = post_round(round, aggregated)?;
        ensure_finite(&global, round)?;
        observer(&RoundTelemetry {
            round,
            participants,
            mean_client_loss: mean_loss(&outcomes),
        });
    }
    Ok(global)
}

/// Plain FedAvg: each round the selected clients train on their full local
/// data and the server averages their models weighted by sample count.
pub fn run_fedavg(
    init: &ParameterVector,
    spec: &ModelSpec,
    clients: &[LabeledDataset],
    cfg: &RoundConfig,
    policy: &RngPolicy,
) -> Result<ParameterVector> {
    run_fedavg_observed(init, spec, clients, cfg, policy, &mut |_| {})
}

pub fn run_fedavg_observed(
    init: &ParameterVector,
    spec: &ModelSpec,
    clients: &[LabeledDataset],
    cfg: &RoundConfig,
    policy: &RngPolicy,
    observer: &mut dyn FnMut(&RoundTelemetry),
) -> Result<ParameterVector> {
    federated_loop(
        init,
        spec,
        clients,
        cfg,
        policy,
        None,
        &fedavg_aggregator,
        &|_, p| Ok(p),
        observer,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::model::init_params;
    use crate::rng::rng_from_seed;

    fn pv(v: &[f64]) -> ParameterVector {
        ParameterVector::from(v.to_vec())
    }

    fn update(id: usize, v: &[f64], n: usize) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            params: pv(v),
            n_samples: n,
        }
    }

    #[test]
    fn aggregate_examples() {
        let single = update(0, &[0.1, -7.3], 4);
        assert_eq!(
            aggregate(std::slice::from_ref(&single)).unwrap(),
            single.params
        );
        let eq = aggregate(&[update(0, &[1.0, 1.0], 5), update(1, &[3.0, 5.0], 5)]).unwrap();
        assert_eq!(eq, pv(&[2.0, 3.0]));
        let weighted = aggregate(&[update(0, &[1.0, 1.0], 1), update(1, &[3.0, 5.0], 3)]).unwrap();
        assert_eq!(weighted, pv(&[2.5, 4.0]));
    }

    #[test]
    fn aggregate_errors() {
        assert!(aggregate(&[]).is_err());
        assert!(aggregate(&[update(0, &[1.0], 1), update(1, &[1.0, 2.0], 1)]).is_err());
        assert!(aggregate(&[update(0, &[1.0], 0)]).is_err());
    }

    #[test]
    fn aggregate_is_idempotent_on_identical_inputs() {
        let p = [0.1, 0.2, -0.3, 1e-7];
        let ups: Vec<_> = (0..7).map(|i| update(i, &p, 3 + i)).collect();
        assert_eq!(aggregate(&ups).unwrap(), pv(&p));
    }

    #[test]
    fn selection_properties() {
        let policy = RngPolicy::new(5);
        assert_eq!(
            select_participants(6, 6, 1, &policy).unwrap(),
            (0..6).collect::<Vec<_>>()
        );
        let a = select_participants(10, 4, 3, &policy).unwrap();
        assert_eq!(a, select_participants(10, 4, 3, &policy).unwrap());
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(select_participants(3, 4, 0, &policy).is_err());
    }

    #[test]
    fn single_selection_is_roughly_uniform() {
        let policy = RngPolicy::new(77);
        let mut freq = [0usize; 10];
        for round in 0..1000 {
            freq[select_participants(10, 1, round, &policy).unwrap()[0]] += 1;
        }
        assert!(freq.iter().all(|&f| (60..=140).contains(&f)), "{freq:?}");
    }

    fn setup() -> (ModelSpec, LabeledDataset, ParameterVector) {
        let spec = ModelSpec::new(3, vec![4], 3).unwrap();
        let data = synth_dataset(3, 12, 3, 2.0, 1).unwrap();
        let init = init_params(&spec, 2);
        (spec, data, init)
    }

    #[test]
    fn local_train_trivial_cases() {
        let (spec, data, init) = setup();
        let mut rng = rng_from_seed(0);
        assert_eq!(
            local_train(&init, &spec, &data, 0, 0.1, 8, &mut rng).unwrap(),
            init
        );
        assert_eq!(
            local_train(&init, &spec, &data, 5, 0.0, 8, &mut rng).unwrap(),
            init
        );
        assert!(local_train(&init, &spec, &LabeledDataset::empty(3), 1, 0.1, 8, &mut rng).is_err());
    }

    #[test]
    fn full_batch_single_iteration_is_one_sgd_step() {
        let (spec, data, init) = setup();
        let mut rng = rng_from_seed(4);
        let trained = local_train(&init, &spec, &data, 1, 0.05, 1000, &mut rng).unwrap();
        let grad = model::gradient(&init, &spec, &data.batch().unwrap()).unwrap();
        assert_eq!(trained, model::sgd_step(&init, &grad, 0.05).unwrap());
    }

    #[test]
    fn fedavg_zero_rounds_returns_init() {
        let (spec, data, init) = setup();
        let cfg = RoundConfig {
            rounds: 0,
            participants_per_round: 1,
            ..RoundConfig::default()
        };
        let out = run_fedavg(&init, &spec, &[data], &cfg, &RngPolicy::new(1)).unwrap();
        assert_eq!(out, init);
    }

    #[test]
    fn observer_sees_every_round() {
        let (spec, data, init) = setup();
        let clients = vec![
            data.subset(&(0..18).collect::<Vec<_>>()),
            data.subset(&(18..36).collect::<Vec<_>>()),
        ];
        let cfg = RoundConfig {
            rounds: 4,
            participants_per_round: 2,
            local_lr: 0.05,
            ..RoundConfig::default()
        };
        let mut seen = Vec::new();
        run_fedavg_observed(&init, &spec, &clients, &cfg, &RngPolicy::new(3), &mut |t| {
            seen.push(t.clone())
        })
        .unwrap();
        assert_eq!(seen.len(), 4);
        assert!(seen
            .iter()
            .all(|t| t.participants == vec![0, 1] && t.mean_client_loss.is_finite()));
    }
}
