//! Desk-scale scenario configs shared by the acceptance and integration tests.

use sqmd_core::client::{Split, TrainHyper};
use sqmd_core::data::{DataSource, DatasetDescriptor, GaussianParams};
use sqmd_core::nn::{Activation, ModelSpec};
use sqmd_core::server::{ServerConfig, SimilaritySelection};
use sqmd_core::sim::{JoinStage, ModelGroup, PartitionPolicy, Protocol, ReferencePolicy, SimConfig};

pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub fn four_device() -> SimConfig {
    serde_json::from_str(include_str!("../../../../configs/four_device.json")).expect("four-device config")
}

fn spec(id: &str, sizes: &[usize], activation: Activation) -> ModelSpec {
    ModelSpec::new(id, sizes.to_vec(), activation).expect("valid spec")
}

/// Four architectures over `dim` features and `classes` outputs: every fourth
/// client gets a low-capacity two-unit model, the rest cycle through a
/// linear model and two MLPs, so every cluster mixes all of them.
pub fn model_mix(dim: usize, classes: usize, clients: usize) -> Vec<ModelGroup> {
    let specs = [
        spec("linear", &[dim, classes], Activation::Relu),
        spec("mlp-relu", &[dim, 24, classes], Activation::Relu),
        spec("mlp-tanh", &[dim, 16, 16, classes], Activation::Tanh),
    ];
    let narrow = spec("narrow", &[dim, 2, classes], Activation::Relu);
    (0..clients)
        .map(|i| ModelGroup {
            spec: if i % 4 == 3 { narrow.clone() } else { specs[i % 3].clone() },
            count: 1,
        })
        .collect()
}

/// 16 clients in two clusters of eight with disjoint favored classes.
pub fn cluster_task(protocol: Protocol, seed: u64) -> SimConfig {
    let (classes, dim) = (6, 10);
    SimConfig {
        name: Some("cluster-skew".into()),
        dataset: DatasetDescriptor {
            source: DataSource::SyntheticGaussian(GaussianParams {
                num_classes: classes,
                feature_dim: dim,
                samples: 6000,
                means: None,
                separation: 1.0,
                stds: None,
                std: 1.0,
                priors: None,
            }),
            normalization: None,
            class_count: None,
        },
        num_clients: 16,
        model_mix: model_mix(dim, classes, 16),
        partition: PartitionPolicy::ClusterSkew { clusters: 2, classes_per_cluster: 3, concentration: 0.9 },
        reference: ReferencePolicy::Fraction { fraction: 0.05 },
        hyper: TrainHyper {
            rho: 0.8,
            eta: 0.05,
            interval: 5,
            batch_size: 16,
            total_iterations: 200,
            full_batch: false,
        },
        server: ServerConfig { q: 12, k: 4, quality_filter: true, selection: SimilaritySelection::Nearest },
        protocol,
        sparsity: 100.0,
        join_schedule: Vec::new(),
        seed,
        data_seed: None,
        record_every: 50,
        eval_splits: vec![Split::Test],
    }
}

pub const JOIN_ROUNDS: [u64; 2] = [100, 200];

/// Three facilities joining in stages: six incumbents, then two groups of
/// five, on an unskewed partition of a larger sample pool.
pub fn staged_task(protocol: Protocol, seed: u64) -> SimConfig {
    let mut c = cluster_task(protocol, seed);
    c.name = Some("staged-join".into());
    if let DataSource::SyntheticGaussian(p) = &mut c.dataset.source {
        p.samples = 12000;
    }
    c.partition = PartitionPolicy::EvenRandom;
    c.hyper.total_iterations = 300;
    c.server.q = 6;
    c.record_every = 1;
    c.join_schedule = vec![
        JoinStage { clients: vec![0, 1, 2, 8, 9, 10], start_round: 1 },
        JoinStage { clients: vec![3, 4, 5, 11, 12], start_round: JOIN_ROUNDS[0] },
        JoinStage { clients: vec![6, 7, 13, 14, 15], start_round: JOIN_ROUNDS[1] },
    ];
    c
}

/// The same run with stage `from` and every later stage pushed past the end.
pub fn without_joins(mut c: SimConfig, from: usize) -> SimConfig {
    let never = c.hyper.total_iterations + 1;
    for stage in c.join_schedule.iter_mut().skip(from) {
        stage.start_round = never;
    }
    c
}
