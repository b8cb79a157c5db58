//! Simulation harness: builds a population of clients from a config, runs the
//! round loop for one of the four protocols and records metrics.

mod partition;
mod record;
mod sweep;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{debug, info};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::{ClientState, LocalData, Split, TrainHyper};
use crate::data::{Dataset, DatasetDescriptor};
use crate::error::{Error, Result};
use crate::nn::{Batch, ModelSpec};
use crate::protocol::{Messenger, ReferenceSet};
use crate::rng;
use crate::server::{Server, ServerConfig, SimilaritySelection};
use crate::ClientId;

pub use partition::{
    balanced_subset, cluster_classes, cluster_of, partition_dataset, sparsify, split_811, Partition, PartitionPolicy,
};
pub use record::{write_comparison_csv, write_metrics_csv, ClientMetrics, RoundRecord, RunRecord, Summary};
pub use sweep::{sweep, ComparisonRow, SweepAxis, SweepField, SweepResult, SweepSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Quality filter plus similarity-based neighbor selection.
    #[default]
    Sqmd,
    /// Every other client is a neighbor.
    #[serde(alias = "fed_md")]
    Fedmd,
    /// A fixed random peer group per client.
    #[serde(alias = "ddist")]
    DDist,
    /// No communication.
    #[serde(alias = "isgd")]
    ISgd,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::Sqmd, Protocol::Fedmd, Protocol::DDist, Protocol::ISgd];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Sqmd => "sqmd",
            Protocol::Fedmd => "fedmd",
            Protocol::DDist => "d_dist",
            Protocol::ISgd => "i_sgd",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        match key.as_str() {
            "sqmd" => Ok(Protocol::Sqmd),
            "fedmd" => Ok(Protocol::Fedmd),
            "ddist" => Ok(Protocol::DDist),
            "isgd" => Ok(Protocol::ISgd),
            _ => Err(Error::Config(format!("unknown protocol '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGroup {
    pub spec: ModelSpec,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferencePolicy {
    /// Class-balanced slice of the main dataset, taken before partitioning.
    Fraction { fraction: f64 },
    /// A separate dataset, truncated to equal class counts.
    Dataset { dataset: DatasetDescriptor },
}

/// Clients that become active at `start_round` (rounds count from 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinStage {
    pub clients: Vec<ClientId>,
    pub start_round: u64,
}

fn default_sparsity() -> f64 {
    100.0
}

fn default_record_every() -> u64 {
    1
}

fn default_splits() -> Vec<Split> {
    vec![Split::Test]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub dataset: DatasetDescriptor,
    pub num_clients: usize,
    /// Model assignment in id order: the first `count` clients get the first
    /// spec, and so on.
    pub model_mix: Vec<ModelGroup>,
    pub partition: PartitionPolicy,
    pub reference: ReferencePolicy,
    pub hyper: TrainHyper,
    pub server: ServerConfig,
    #[serde(default)]
    pub protocol: Protocol,
    /// Percentage of each client's training split that is kept.
    #[serde(default = "default_sparsity")]
    pub sparsity: f64,
    /// Empty means every client is active from round 1.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub join_schedule: Vec<JoinStage>,
    pub seed: u64,
    /// Seed for dataset generation and partitioning; defaults to `seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    #[serde(default = "default_record_every")]
    pub record_every: u64,
    #[serde(default = "default_splits")]
    pub eval_splits: Vec<Split>,
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: SimConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Checks everything that does not require loading data.
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Config("num_clients must be positive".into()));
        }
        let assigned: usize = self.model_mix.iter().map(|g| g.count).sum();
        if assigned != self.num_clients {
            return Err(Error::Config(format!(
                "model_mix assigns {assigned} clients but num_clients is {}",
                self.num_clients
            )));
        }
        for g in &self.model_mix {
            g.spec.validate()?;
        }
        if let Some(first) = self.model_mix.first() {
            let (d, c) = (first.spec.input_dim(), first.spec.num_classes());
            if let Some(bad) = self.model_mix.iter().find(|g| g.spec.input_dim() != d || g.spec.num_classes() != c) {
                return Err(Error::Config(format!(
                    "model '{}' disagrees with '{}' on input or output size",
                    bad.spec.spec_id, first.spec.spec_id
                )));
            }
        }
        self.partition.validate(self.num_clients)?;
        if let ReferencePolicy::Fraction { fraction } = self.reference {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(Error::Config(format!("reference fraction must lie in (0, 1), got {fraction}")));
            }
        }
        self.hyper.validate()?;
        self.server.validate()?;
        if !(self.sparsity > 0.0 && self.sparsity <= 100.0) {
            return Err(Error::Config(format!("sparsity must lie in (0, 100], got {}", self.sparsity)));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be positive".into()));
        }
        if self.eval_splits.is_empty() {
            return Err(Error::Config("eval_splits must not be empty".into()));
        }
        if !self.join_schedule.is_empty() {
            let mut seen = BTreeSet::new();
            let mut last = 0;
            for stage in &self.join_schedule {
                if stage.start_round < last {
                    return Err(Error::Config("join stages must have non-decreasing start rounds".into()));
                }
                last = stage.start_round;
                for &c in &stage.clients {
                    if c as usize >= self.num_clients || !seen.insert(c) {
                        return Err(Error::Config(format!("client {c} is unknown or listed twice in join_schedule")));
                    }
                }
            }
            if seen.len() != self.num_clients {
                return Err(Error::Config("join_schedule must list every client exactly once".into()));
            }
        }
        Ok(())
    }

    /// Model spec of every client, in id order.
    pub fn client_specs(&self) -> Vec<&ModelSpec> {
        self.model_mix
            .iter()
            .flat_map(|g| std::iter::repeat_n(&g.spec, g.count))
            .collect()
    }

    /// First active round of every client.
    pub fn join_rounds(&self) -> Vec<u64> {
        let mut rounds = vec![1; self.num_clients];
        for stage in &self.join_schedule {
            for &c in &stage.clients {
                rounds[c as usize] = stage.start_round.max(1);
            }
        }
        rounds
    }

    /// Server settings actually used for `protocol`.
    pub fn effective_server(&self) -> ServerConfig {
        match self.protocol {
            Protocol::Fedmd => ServerConfig {
                q: self.num_clients,
                k: self.num_clients,
                quality_filter: false,
                selection: SimilaritySelection::Nearest,
            },
            _ => self.server.clone(),
        }
    }
}

/// Loaded data, fixed partition and per-client splits for a config.
#[derive(Debug, Clone)]
pub struct World {
    pub reference: ReferenceSet,
    pub clients: Vec<LocalData>,
}

fn to_batch(d: &Dataset) -> Result<Batch> {
    Batch::from_classes(d.features.clone(), &d.labels, d.num_classes)
}

impl World {
    pub fn build(config: &SimConfig, base_dir: Option<&Path>) -> Result<World> {
        config.validate()?;
        let seed = config.data_seed();
        let data = config.dataset.load(base_dir, seed)?;
        let spec = config.client_specs()[0];
        if data.feature_dim() != spec.input_dim() {
            return Err(Error::Config(format!(
                "dataset has {} features but models expect {}",
                data.feature_dim(),
                spec.input_dim()
            )));
        }
        if data.num_classes != spec.num_classes() {
            return Err(Error::Config(format!(
                "dataset has {} classes but models output {}",
                data.num_classes,
                spec.num_classes()
            )));
        }
        let (fraction, external) = match &config.reference {
            ReferencePolicy::Fraction { fraction } => (*fraction, None),
            ReferencePolicy::Dataset { dataset } => {
                let mut r = dataset.load(base_dir, seed.wrapping_add(1))?;
                if r.feature_dim() != data.feature_dim() {
                    return Err(Error::dim("reference features", data.feature_dim(), r.feature_dim()));
                }
                r.num_classes = data.num_classes;
                let per_class = r.class_counts().into_iter().min().unwrap_or(0);
                if per_class == 0 {
                    return Err(Error::Config("reference dataset lacks at least one class".into()));
                }
                let idx = balanced_subset(&r, per_class, seed);
                (0.0, Some(r.select(&idx)))
            }
        };
        let partition = partition_dataset(&data, &config.partition, config.num_clients, fraction, seed)?;
        let (slices, sliced_reference) = partition.materialize(&data);
        let reference = external.unwrap_or(sliced_reference);
        let reference = ReferenceSet::new(reference.features, &reference.labels, data.num_classes)?;

        let mut clients = Vec::with_capacity(slices.len());
        for (id, slice) in slices.iter().enumerate() {
            let (tr, va, te) = split_811(slice.len(), seed, id as u64);
            let train = sparsify(&slice.select(&tr), config.sparsity, seed, id as u64)
                .map_err(|e| e.for_client(id as ClientId))?;
            let local = LocalData {
                train: to_batch(&train)?,
                val: to_batch(&slice.select(&va))?,
                test: to_batch(&slice.select(&te))?,
            };
            for &split in &config.eval_splits {
                if local.split(split).is_empty() {
                    return Err(Error::Config(format!(
                        "client {id} has an empty {} split ({} samples in its slice)",
                        split.as_str(),
                        slice.len()
                    )));
                }
            }
            clients.push(local);
        }
        Ok(World { reference, clients })
    }
}

/// What happened in one round, for callers that drive the loop themselves.
#[derive(Debug, Clone, Default)]
pub struct RoundOutcome {
    pub round: u64,
    pub joined: Vec<ClientId>,
    pub communicated: Vec<ClientId>,
    pub quality_set: Option<Vec<ClientId>>,
    pub neighbors: BTreeMap<ClientId, Vec<ClientId>>,
}

/// A running simulation. [`run_simulation`] drives it to completion; tests
/// and tools can step it round by round and inspect clients and server.
pub struct Simulation {
    config: SimConfig,
    config_hash: String,
    reference: ReferenceSet,
    clients: Vec<ClientState>,
    join_rounds: Vec<u64>,
    active: Vec<bool>,
    server: Server,
    server_config: ServerConfig,
    peer_groups: BTreeMap<ClientId, Vec<ClientId>>,
    round: u64,
    rounds: Vec<RoundRecord>,
}

impl Simulation {
    pub fn new(config: &SimConfig, base_dir: Option<&Path>) -> Result<Self> {
        let world = World::build(config, base_dir)?;
        Self::from_world(config, world)
    }

    pub fn from_world(config: &SimConfig, world: World) -> Result<Self> {
        config.validate()?;
        if world.clients.len() != config.num_clients {
            return Err(Error::Config(format!(
                "world has {} clients, config expects {}",
                world.clients.len(),
                config.num_clients
            )));
        }
        let clients = config
            .client_specs()
            .into_iter()
            .zip(world.clients)
            .enumerate()
            .map(|(id, (spec, data))| ClientState::new(id as ClientId, spec.clone(), data, config.seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Simulation {
            config_hash: config.hash(),
            server: Server::new(world.reference.clone()),
            server_config: config.effective_server(),
            reference: world.reference,
            join_rounds: config.join_rounds(),
            active: vec![false; clients.len()],
            clients,
            peer_groups: BTreeMap::new(),
            round: 0,
            rounds: Vec::new(),
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.config.hyper.total_iterations
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn server(&self) -> &Server {
        &self.server
    }

    pub fn reference(&self) -> &ReferenceSet {
        &self.reference
    }

    pub fn is_active(&self, id: ClientId) -> bool {
        self.active.get(id as usize).copied().unwrap_or(false)
    }

    pub fn peer_groups(&self) -> &BTreeMap<ClientId, Vec<ClientId>> {
        &self.peer_groups
    }

    /// Activates a client. Except under I-SGD it registers with the server
    /// and uploads its initial messenger, which peers can see from this round
    /// on; it receives neighbors only at its own exchange rounds.
    fn join(&mut self, id: ClientId, round: u64) -> Result<()> {
        self.active[id as usize] = true;
        match self.config.protocol {
            Protocol::ISgd => {}
            Protocol::DDist => {
                let others: Vec<ClientId> = (0..self.clients.len() as ClientId).filter(|&c| c != id).collect();
                let size = self.config.server.k.min(others.len());
                let mut stream = rng::stream(self.config.seed, rng::STREAM_PEER_GROUP, u64::from(id));
                let mut group: Vec<ClientId> =
                    index::sample(&mut stream, others.len(), size).into_iter().map(|i| others[i]).collect();
                group.sort_unstable();
                self.peer_groups.insert(id, group);
            }
            Protocol::Sqmd | Protocol::Fedmd => {}
        }
        if self.config.protocol != Protocol::ISgd {
            self.server.register_client(id)?;
            let initial = self.clients[id as usize].make_messenger(&self.reference, round)?;
            self.server.receive_messenger(initial)?;
        }
        Ok(())
    }

    /// Runs one global round: joins, exchange (if due), one step per active
    /// client, then optional evaluation.
    pub fn step(&mut self) -> Result<RoundOutcome> {
        if self.is_finished() {
            return Err(Error::Contract("simulation already finished".into()));
        }
        let t = self.round + 1;
        self.step_inner(t).map_err(|e| e.at_round(t))
    }

    fn step_inner(&mut self, t: u64) -> Result<RoundOutcome> {
        let mut outcome = RoundOutcome {
            round: t,
            ..RoundOutcome::default()
        };
        for id in 0..self.clients.len() {
            if !self.active[id] && self.join_rounds[id] <= t {
                self.join(id as ClientId, t)?;
                outcome.joined.push(id as ClientId);
            }
        }
        if !outcome.joined.is_empty() {
            info!("round {t}: clients {:?} joined", outcome.joined);
        }

        let interval = self.config.hyper.interval;
        if self.config.protocol != Protocol::ISgd {
            outcome.communicated = self
                .clients
                .iter()
                .filter(|c| self.active[c.client_id as usize] && c.due_to_communicate(interval))
                .map(|c| c.client_id)
                .collect();
        }
        if !outcome.communicated.is_empty() {
            let messengers = outcome
                .communicated
                .iter()
                .map(|&id| self.clients[id as usize].make_messenger(&self.reference, t))
                .collect::<Result<Vec<Messenger>>>()?;
            self.server.receive_batch(messengers)?;
            match self.config.protocol {
                Protocol::Sqmd | Protocol::Fedmd => {
                    let mut sets = self.server.server_round(&self.server_config, self.config.seed, t)?;
                    for &id in &outcome.communicated {
                        let set = sets.remove(&id).unwrap_or_default();
                        outcome.neighbors.insert(id, set.iter().map(|m| m.client_id).collect());
                        self.clients[id as usize].accept_neighbors(&set)?;
                    }
                    outcome.quality_set = Some(self.server.quality().quality_set.clone());
                }
                Protocol::DDist => {
                    for &id in &outcome.communicated {
                        let set: Vec<Messenger> = self.peer_groups[&id]
                            .iter()
                            .filter_map(|p| self.server.repository().get(*p).cloned())
                            .collect();
                        outcome.neighbors.insert(id, set.iter().map(|m| m.client_id).collect());
                        self.clients[id as usize].accept_neighbors(&set)?;
                    }
                }
                Protocol::ISgd => unreachable!("no exchange without communication"),
            }
            debug!("round {t}: neighbors {:?}", outcome.neighbors);
        }

        let ref_features = &self.reference.features;
        for client in self.clients.iter_mut().filter(|c| self.active[c.client_id as usize]) {
            client.client_step(&self.config.hyper, ref_features)?;
        }
        self.round = t;

        let mut record = RoundRecord {
            round: t,
            quality_set: outcome.quality_set.clone(),
            neighbors: outcome.neighbors.clone(),
            metrics: Vec::new(),
        };
        if t % self.config.record_every == 0 || t == self.config.hyper.total_iterations {
            record.metrics = self.evaluate_active()?;
        }
        if !record.is_empty() {
            self.rounds.push(record);
        }
        Ok(outcome)
    }

    fn evaluate_active(&self) -> Result<Vec<ClientMetrics>> {
        let quality = self.server.quality();
        let mut out = Vec::new();
        for client in self.clients.iter().filter(|c| self.active[c.client_id as usize]) {
            let id = client.client_id;
            for &split in &self.config.eval_splits {
                let m = client.evaluate(split)?;
                out.push(ClientMetrics {
                    client_id: id,
                    split,
                    accuracy: m.accuracy,
                    precision: m.precision,
                    recall: m.recall,
                    quality_score: quality.scores.get(&id).copied(),
                    in_q: quality.contains(id),
                });
            }
        }
        Ok(out)
    }

    /// Runs the remaining rounds and returns the record.
    pub fn finish(mut self) -> Result<RunRecord> {
        while !self.is_finished() {
            self.step()?;
        }
        let final_metrics: Vec<ClientMetrics> = self
            .rounds
            .last()
            .map(|r| r.metrics.iter().filter(|m| m.split == Split::Test).cloned().collect())
            .unwrap_or_default();
        let final_metrics = if final_metrics.is_empty() {
            self.clients
                .iter()
                .filter(|c| self.active[c.client_id as usize])
                .map(|c| {
                    let m = c.evaluate(Split::Test)?;
                    Ok(ClientMetrics {
                        client_id: c.client_id,
                        split: Split::Test,
                        accuracy: m.accuracy,
                        precision: m.precision,
                        recall: m.recall,
                        quality_score: self.server.quality().scores.get(&c.client_id).copied(),
                        in_q: self.server.quality().contains(c.client_id),
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            final_metrics
        };
        Ok(RunRecord {
            config_hash: self.config_hash,
            seed: self.config.seed,
            protocol: self.config.protocol,
            num_clients: self.config.num_clients,
            rounds: self.rounds,
            summary: Summary::from_metrics(final_metrics),
        })
    }
}

/// Builds the world for `config`, runs every round and returns the record.
pub fn run_simulation(config: &SimConfig, base_dir: Option<&Path>) -> Result<RunRecord> {
    info!("running {} with seed {}", config.protocol, config.seed);
    Simulation::new(config, base_dir)?.finish()
}
