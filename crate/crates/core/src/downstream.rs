//! Downstream evaluation: sample FL tasks from held-out classes, fine-tune
//! from a pre-trained initialization with full participation, and measure
//! per-client test accuracy.
//!
//! Reported accuracies are in percentage points and variances in squared
//! percentage points. [`TaskMetrics`] itself holds raw fractions.

use std::io::Write;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::qffl_aggregate;
use crate::data::{
    partition_clients, support_query_split, ClientShard, Distribution, LabeledDataset,
};
use crate::error::{check_len, invalid, Result};
use crate::fl::{
    fedavg_aggregator, federated_loop, ClientUpdate, LocalOutcome, RoundConfig, RoundTelemetry,
};
use crate::model::{self, ModelSpec, ParameterVector};
use crate::rng::{derive_seed, rng_from_seed, Purpose, RngPolicy};

/// Worst-k% levels reported per task.
pub const WORST_LEVELS: [usize; 3] = [10, 20, 30];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub n_way: usize,
    pub n_clients: usize,
    pub distribution: Distribution,
    pub train_frac: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            n_way: 5,
            n_clients: 10,
            distribution: Distribution::Dirichlet { alpha: 0.5 },
            train_frac: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum DownstreamAlgorithm {
    FedAvg,
    FedProx { mu: f64 },
    Qffl { q: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoParams {
    pub algorithm: DownstreamAlgorithm,
    pub rounds: usize,
    pub local_iters: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for AlgoParams {
    fn default() -> Self {
        Self {
            algorithm: DownstreamAlgorithm::FedAvg,
            rounds: 10,
            local_iters: 5,
            lr: 1e-3,
            batch_size: 32,
        }
    }
}

/// A downstream FL task. Labels are remapped to `0..n_way` following the
/// ascending order of `classes`; each shard's support is its train split and
/// its query the test split.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub classes: Vec<usize>,
    pub distribution: Distribution,
    pub clients: Vec<ClientShard>,
}

impl TaskSpec {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub per_client_acc: Vec<f64>,
    pub mean_acc: f64,
    /// Population variance of the per-client accuracies, raw fractions.
    pub acc_variance: f64,
    pub worst_10: f64,
    pub worst_20: f64,
    pub worst_30: f64,
}

/// Mean of a slice sorted ascending, accumulated so that each prefix mean is
/// non-decreasing.
fn prefix_means(sorted: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(sorted.len());
    let mut mean = 0.0;
    for (k, x) in sorted.iter().enumerate() {
        mean += (x - mean) / (k + 1) as f64;
        out.push(mean);
    }
    out
}

/// Number of clients in the worst `k` percent of `n`.
pub fn worst_count(k: usize, n: usize) -> usize {
    (k * n).div_ceil(100).clamp(1, n.max(1))
}

impl TaskMetrics {
    pub fn from_accuracies(per_client_acc: Vec<f64>) -> Result<Self> {
        if per_client_acc.is_empty() {
            return Err(invalid("a task needs at least one client accuracy"));
        }
        let n = per_client_acc.len();
        let mut sorted = per_client_acc.clone();
        sorted.sort_by(f64::total_cmp);
        let prefix = prefix_means(&sorted);
        let mean_acc = prefix[n - 1];
        let acc_variance = sorted.iter().map(|a| (a - mean_acc).powi(2)).sum::<f64>() / n as f64;
        let worst = |k| prefix[worst_count(k, n) - 1];
        Ok(Self {
            mean_acc,
            acc_variance,
            worst_10: worst(10),
            worst_20: worst(20),
            worst_30: worst(30),
            per_client_acc,
        })
    }

    pub fn worst(&self, k: usize) -> Option<f64> {
        match k {
            10 => Some(self.worst_10),
            20 => Some(self.worst_20),
            30 => Some(self.worst_30),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: usize,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn from_values(values: impl IntoIterator<Item = f64>, bins: usize) -> Self {
        let mut counts = vec![0; bins];
        for v in values {
            let b = ((v.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1);
            counts[b] += 1;
        }
        Self { bins, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "bin_low,bin_high,count")?;
        let width = 1.0 / self.bins as f64;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(
                out,
                "{:.4},{:.4},{}",
                i as f64 * width,
                (i + 1) as f64 * width,
                c
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub per_task: Vec<TaskMetrics>,
    /// Original class ids of each task.
    pub task_classes: Vec<Vec<usize>>,
    pub mean_acc: f64,
    pub acc_variance: f64,
    pub worst_10: f64,
    pub worst_20: f64,
    pub worst_30: f64,
    pub histogram: Histogram,
}

/// Converts a fraction to percentage points.
pub fn pct(x: f64) -> f64 {
    100.0 * x
}

/// Converts a variance of fractions to squared percentage points.
pub fn pct2(x: f64) -> f64 {
    1e4 * x
}

impl SuiteReport {
    pub fn from_tasks(
        per_task: Vec<TaskMetrics>,
        task_classes: Vec<Vec<usize>>,
        bins: usize,
    ) -> Result<Self> {
        if per_task.is_empty() {
            return Err(invalid("a suite needs at least one task"));
        }
        let x = per_task.len() as f64;
        let avg = |f: fn(&TaskMetrics) -> f64| per_task.iter().map(f).sum::<f64>() / x;
        let histogram = Histogram::from_values(
            per_task
                .iter()
                .flat_map(|t| t.per_client_acc.iter().copied()),
            bins,
        );
        Ok(Self {
            mean_acc: avg(|t| t.mean_acc),
            acc_variance: avg(|t| t.acc_variance),
            worst_10: avg(|t| t.worst_10),
            worst_20: avg(|t| t.worst_20),
            worst_30: avg(|t| t.worst_30),
            histogram,
            task_classes,
            per_task,
        })
    }

    pub fn write_json<W: Write>(&self, out: W) -> std::io::Result<()> {
        serde_json::to_writer_pretty(out, self).map_err(std::io::Error::other)
    }

    /// One row per task in percentage points, two decimals.
    pub fn write_tasks_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "task_id,mean_acc,variance,worst10,worst20,worst30")?;
        for (i, t) in self.per_task.iter().enumerate() {
            writeln!(
                out,
                "{i},{:.2},{:.2},{:.2},{:.2},{:.2}",
                pct(t.mean_acc),
                pct2(t.acc_variance),
                pct(t.worst_10),
                pct(t.worst_20),
                pct(t.worst_30)
            )?;
        }
        Ok(())
    }
}

/// Draws `n_way` classes uniformly from the pool, spreads their samples over
/// `n_clients` clients and splits each client into train/test.
pub fn sample_task(pool: &LabeledDataset, params: &TaskParams, seed: u64) -> Result<TaskSpec> {
    params.distribution.validate()?;
    let available = pool.class_ids();
    if params.n_way == 0 || params.n_way > available.len() {
        return Err(invalid(format!(
            "n_way {} must lie in [1, {}] for this pool",
            params.n_way,
            available.len()
        )));
    }
    if params.n_clients == 0 {
        return Err(invalid("a task needs at least one client"));
    }
    let mut rng = rng_from_seed(derive_seed(seed, &[0]));
    let mut classes: Vec<usize> = index::sample(&mut rng, available.len(), params.n_way)
        .into_iter()
        .map(|i| available[i])
        .collect();
    classes.sort_unstable();

    let max_label = available.last().copied().unwrap_or(0);
    let mut map = vec![None; max_label + 1];
    for (new, &old) in classes.iter().enumerate() {
        map[old] = Some(new);
    }
    let members: Vec<usize> = (0..pool.len())
        .filter(|&i| map[pool.labels()[i]].is_some())
        .collect();
    let selected = pool.subset(&members).remap_labels(&map)?;

    let parts = partition_clients(
        &selected,
        params.n_clients,
        params.distribution,
        2,
        derive_seed(seed, &[1]),
    )?;
    let clients = parts
        .into_iter()
        .enumerate()
        .map(|(id, part)| {
            support_query_split(
                part,
                params.train_frac,
                derive_seed(seed, &[2, id as u64]),
                id,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskSpec {
        classes,
        distribution: params.distribution,
        clients,
    })
}

fn qffl_downstream(
    q: f64,
) -> impl Fn(&ParameterVector, &[LocalOutcome]) -> Result<ParameterVector> + Sync {
    move |base, outcomes| {
        let updates: Vec<ClientUpdate> = outcomes.iter().map(LocalOutcome::to_update).collect();
        let losses: Vec<f64> = outcomes.iter().map(|o| o.train_loss).collect();
        qffl_aggregate(&updates, &losses, q, base)
    }
}

/// Fine-tunes `init` on the task's train splits for `rounds` rounds with every
/// client participating in every round.
pub fn run_downstream(
    init: &ParameterVector,
    spec: &ModelSpec,
    task: &TaskSpec,
    algo: &AlgoParams,
    policy: &RngPolicy,
) -> Result<ParameterVector> {
    run_downstream_observed(init, spec, task, algo, policy, &mut |_| {})
}

pub fn run_downstream_observed(
    init: &ParameterVector,
    spec: &ModelSpec,
    task: &TaskSpec,
    algo: &AlgoParams,
    policy: &RngPolicy,
    observer: &mut dyn FnMut(&RoundTelemetry),
) -> Result<ParameterVector> {
    check_len(spec.parameter_count(), init.len())?;
    if spec.n_classes < task.n_way() {
        return Err(invalid(format!(
            "model head has {} outputs but the task has {} classes",
            spec.n_classes,
            task.n_way()
        )));
    }
    let train: Vec<LabeledDataset> = task.clients.iter().map(ClientShard::support_set).collect();
    let cfg = RoundConfig {
        rounds: algo.rounds,
        participants_per_round: train.len(),
        local_iters: algo.local_iters,
        local_lr: algo.lr,
        batch_size: algo.batch_size,
    };
    match algo.algorithm {
        DownstreamAlgorithm::FedAvg => federated_loop(
            init,
            spec,
            &train,
            &cfg,
            policy,
            None,
            &fedavg_aggregator,
            &|_, p| Ok(p),
            observer,
        ),
        DownstreamAlgorithm::FedProx { mu } => {
            if !(mu >= 0.0 && mu.is_finite()) {
                return Err(invalid("FedProx mu must be non-negative"));
            }
            federated_loop(
                init,
                spec,
                &train,
                &cfg,
                policy,
                Some(mu),
                &fedavg_aggregator,
                &|_, p| Ok(p),
                observer,
            )
        }
        DownstreamAlgorithm::Qffl { q } => federated_loop(
            init,
            spec,
            &train,
            &cfg,
            policy,
            None,
            &qffl_downstream(q),
            &|_, p| Ok(p),
            observer,
        ),
    }
}

/// Per-client accuracy on each client's test split.
pub fn evaluate_task(
    final_params: &ParameterVector,
    spec: &ModelSpec,
    task: &TaskSpec,
) -> Result<TaskMetrics> {
    let accs = task
        .clients
        .iter()
        .map(|c| model::accuracy(final_params, spec, &c.query_set().batch()?))
        .collect::<Result<Vec<_>>>()?;
    TaskMetrics::from_accuracies(accs)
}

pub const HISTOGRAM_BINS: usize = 20;

/// Runs `n_tasks` independent tasks from the same initialization. Task `i`
/// depends only on `(master_seed, i)`, so two suites with the same seed see
/// the same tasks regardless of the initialization being evaluated.
pub fn run_suite(
    init: &ParameterVector,
    spec: &ModelSpec,
    pool: &LabeledDataset,
    n_tasks: usize,
    task_params: &TaskParams,
    algo_params: &AlgoParams,
    master_seed: u64,
) -> Result<SuiteReport> {
    if n_tasks == 0 {
        return Err(invalid("a suite needs at least one task"));
    }
    let root = RngPolicy::new(master_seed);
    let results = (0..n_tasks)
        .into_par_iter()
        .map(|i| {
            let task = sample_task(pool, task_params, root.seed(Purpose::Task, 0, i as u64))?;
            let policy = root.child(Purpose::LocalTrain, i as u64);
            let trained = run_downstream(init, spec, &task, algo_params, &policy)?;
            Ok((evaluate_task(&trained, spec, &task)?, task.classes))
        })
        .collect::<Result<Vec<_>>>()?;
    let (per_task, classes) = results.into_iter().unzip();
    SuiteReport::from_tasks(per_task, classes, HISTOGRAM_BINS)
}
