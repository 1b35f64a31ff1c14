//! Fixtures shared by the benchmarks.

use coprefl_core::data::{synth_dataset, FederatedDataset};
use coprefl_core::model::{init_params, ModelSpec, ParameterVector};
use coprefl_core::{BalancerConfig, Distribution, RoundConfig};

pub struct Fixture {
    pub spec: ModelSpec,
    pub init: ParameterVector,
    pub federated: FederatedDataset,
    pub rounds: RoundConfig,
    pub balancer: BalancerConfig,
}

/// A 20-client Dirichlet federation over a 4-class, 16-dimensional mixture
/// and a one-hidden-layer MLP.
pub fn fixture(rounds: usize) -> Fixture {
    let pool = synth_dataset(4, 150, 16, 4.0, 1).expect("valid mixture");
    let federated = FederatedDataset::build(
        &pool,
        20,
        Distribution::Dirichlet { alpha: 0.5 },
        0.8,
        0.05,
        2,
    )
    .expect("valid federation");
    let spec = ModelSpec::new(16, vec![16], 8).expect("valid spec");
    Fixture {
        init: init_params(&spec, 3),
        spec,
        federated,
        rounds: RoundConfig {
            rounds,
            participants_per_round: 8,
            local_iters: 5,
            local_lr: 0.05,
            batch_size: 32,
        },
        balancer: BalancerConfig {
            gamma: 0.5,
            meta_lr: 0.05,
        },
    }
}
