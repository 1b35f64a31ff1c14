//! End-to-end experiment pipeline: data preparation, pre-training by method,
//! downstream suite.
//!
//! All seeds derive from `ExperimentConfig::seed`, so two methods run from the
//! same config see the same clients, server data, initialization and
//! downstream tasks.

use coprefl_core::baselines::{self, QfflConfig, ServerRefine};
use coprefl_core::coprefl::{self, PretrainResult};
use coprefl_core::data::{
    split_classes_with_overlap, synth_dataset, FederatedDataset, LabeledDataset,
};
use coprefl_core::downstream::{run_suite, SuiteReport};
use coprefl_core::model::{init_params, ModelSpec, ParameterVector};
use coprefl_core::rng::{derive_seed, Purpose, RngPolicy};
use coprefl_core::Result;

use crate::config::{ExperimentConfig, Method};

/// Data and initialization shared by every method of one experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: ModelSpec,
    pub federated: FederatedDataset,
    pub downstream_pool: LabeledDataset,
    pub init: ParameterVector,
}

fn data_seed(cfg: &ExperimentConfig, step: u64) -> u64 {
    derive_seed(cfg.seed, &[Purpose::Data as u64, step])
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let d = &cfg.dataset;
    let spec = cfg.model_spec();
    let all = synth_dataset(
        d.n_classes,
        d.n_per_class,
        d.dim,
        d.separation,
        data_seed(cfg, 0),
    )?;
    let split = split_classes_with_overlap(
        &all,
        d.pretrain_classes,
        d.overlap_classes,
        data_seed(cfg, 1),
    )?;
    let federated = FederatedDataset::build(
        &split.pretrain,
        cfg.pretrain.clients,
        cfg.pretrain_distribution(),
        cfg.pretrain.support_frac,
        d.server_frac,
        data_seed(cfg, 2),
    )?;
    let init = init_params(&spec, derive_seed(cfg.seed, &[Purpose::Init as u64]));
    Ok(Prepared {
        spec,
        federated,
        downstream_pool: split.downstream,
        init,
    })
}

fn pretrain_policy(cfg: &ExperimentConfig) -> RngPolicy {
    RngPolicy::new(derive_seed(cfg.seed, &[Purpose::LocalTrain as u64]))
}

fn plain(final_params: ParameterVector) -> PretrainResult {
    PretrainResult {
        final_params,
        history: Vec::new(),
    }
}

/// Pre-trains with `method`. Only the meta-learned methods produce a history.
pub fn pretrain(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    method: Method,
) -> Result<PretrainResult> {
    let p = &cfg.pretrain;
    let spec = &prepared.spec;
    let init = &prepared.init;
    let fed = &prepared.federated;
    let round_cfg = cfg.round_config();
    let policy = pretrain_policy(cfg);
    let clients = fed.client_datasets();
    let qcfg = QfflConfig { q: p.q };
    let refine = ServerRefine {
        data: &fed.server_data,
        iters: p.refine_iters,
        lr: p.local_lr,
        batch_size: p.batch_size,
    };

    let result = match method {
        Method::Random => plain(init.clone()),
        Method::CopreflS1 => coprefl::pretrain_scenario1(
            init,
            spec,
            &fed.clients,
            &round_cfg,
            &cfg.balancer(),
            &policy,
        )?,
        Method::CopreflS2 => coprefl::pretrain_scenario2(
            init,
            spec,
            &clients,
            &fed.server_data,
            &round_cfg,
            &cfg.balancer(),
            &policy,
        )?,
        Method::CopreflSgd => coprefl::pretrain_coprefl_sgd(
            init,
            spec,
            &fed.clients,
            &fed.server_data,
            &round_cfg,
            &cfg.balancer(),
            p.refine_iters,
            &policy,
        )?,
        Method::Fedavg => plain(baselines::pretrain_fedavg(
            init, spec, &clients, &round_cfg, &policy,
        )?),
        Method::FedavgServer => plain(baselines::pretrain_fedavg_refined(
            init, spec, &clients, &round_cfg, &refine, &policy,
        )?),
        Method::Fedmeta => plain(baselines::pretrain_fedmeta(
            init,
            spec,
            &fed.clients,
            &round_cfg,
            p.local_lr,
            p.fedmeta_outer_lr,
            &policy,
        )?),
        Method::FedmetaServer => plain(baselines::pretrain_fedmeta_refined(
            init,
            spec,
            &fed.clients,
            &round_cfg,
            p.local_lr,
            p.fedmeta_outer_lr,
            &refine,
            &policy,
        )?),
        Method::Qffl => plain(baselines::pretrain_qffl(
            init, spec, &clients, &round_cfg, &qcfg, &policy,
        )?),
        Method::QfflServer => plain(baselines::pretrain_qffl_refined(
            init, spec, &clients, &round_cfg, &qcfg, &refine, &policy,
        )?),
        Method::Centralized => {
            let mut parts: Vec<&LabeledDataset> = fed.clients.iter().map(|c| &c.data).collect();
            parts.push(&fed.server_data);
            let pooled = LabeledDataset::concat(&parts)?;
            plain(baselines::pretrain_centralized(
                init,
                spec,
                &pooled,
                p.centralized_epochs,
                p.local_lr,
                p.batch_size,
                derive_seed(cfg.seed, &[Purpose::LocalTrain as u64, 1]),
            )?)
        }
    };
    Ok(result)
}

/// Master seed of the downstream suite; independent of the pre-training method.
pub fn suite_seed(cfg: &ExperimentConfig) -> u64 {
    derive_seed(cfg.seed, &[Purpose::Task as u64])
}

pub fn downstream(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    params: &ParameterVector,
) -> Result<SuiteReport> {
    run_suite(
        params,
        &prepared.spec,
        &prepared.downstream_pool,
        cfg.downstream.tasks,
        &cfg.task_params(),
        &cfg.algo_params(),
        suite_seed(cfg),
    )
}
