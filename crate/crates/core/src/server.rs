//! Coordination server: messenger repository, quality set and neighbor sets.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{
    score_quality, select_neighbors, select_quality_set, CollaborationGraph, Messenger, QualityTable, ReferenceSet,
};
use crate::rng;
use crate::ClientId;

/// How each client's neighbors are drawn from the quality set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySelection {
    /// The `k` candidates with the smallest messenger divergence.
    #[default]
    Nearest,
    /// A uniform random `k`-subset (the similarity ablation).
    Random,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub q: usize,
    pub k: usize,
    #[serde(default = "default_true")]
    pub quality_filter: bool,
    #[serde(default)]
    pub selection: SimilaritySelection,
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 || self.k == 0 {
            return Err(Error::Config("q and k must be positive".into()));
        }
        if self.quality_filter && self.k > self.q {
            return Err(Error::Config(format!(
                "k ({}) must not exceed q ({}) while the quality filter is enabled",
                self.k, self.q
            )));
        }
        Ok(())
    }
}

/// Latest messenger per client.
#[derive(Debug, Clone, Default)]
pub struct MessengerRepository {
    latest: BTreeMap<ClientId, Messenger>,
}

impl MessengerRepository {
    pub fn len(&self) -> usize {
        self.latest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latest.is_empty()
    }

    pub fn get(&self, id: ClientId) -> Option<&Messenger> {
        self.latest.get(&id)
    }

    pub fn round_received(&self) -> BTreeMap<ClientId, u64> {
        self.latest.iter().map(|(&id, m)| (id, m.round)).collect()
    }

    pub fn ids(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.latest.keys().copied()
    }
}

/// JSON-exportable view of the server after a round.
///
/// `weights[i][j]` is the similarity from `client_ids[i]` to `client_ids[j]`;
/// `0` means the pair was not ranked and `null` stands for an infinite
/// similarity (identical messengers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerSnapshot {
    pub registered: Vec<ClientId>,
    pub round_received: BTreeMap<ClientId, u64>,
    pub scores: BTreeMap<ClientId, f64>,
    pub quality_set: Vec<ClientId>,
    pub neighbors: BTreeMap<ClientId, Vec<ClientId>>,
    pub client_ids: Vec<ClientId>,
    pub weights: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone)]
pub struct Server {
    reference: ReferenceSet,
    registered: BTreeSet<ClientId>,
    repository: MessengerRepository,
    scores: BTreeMap<ClientId, f64>,
    quality: QualityTable,
    graph: CollaborationGraph,
}

impl Server {
    pub fn new(reference: ReferenceSet) -> Self {
        Server {
            reference,
            registered: BTreeSet::new(),
            repository: MessengerRepository::default(),
            scores: BTreeMap::new(),
            quality: QualityTable::default(),
            graph: CollaborationGraph::default(),
        }
    }

    pub fn reference(&self) -> &ReferenceSet {
        &self.reference
    }

    pub fn repository(&self) -> &MessengerRepository {
        &self.repository
    }

    pub fn registered(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.registered.iter().copied()
    }

    pub fn quality(&self) -> &QualityTable {
        &self.quality
    }

    pub fn graph(&self) -> &CollaborationGraph {
        &self.graph
    }

    pub fn register_client(&mut self, id: ClientId) -> Result<()> {
        if !self.registered.insert(id) {
            return Err(Error::DuplicateClient(id));
        }
        Ok(())
    }

    /// Stores a messenger and re-scores its client. Returns `false` when the
    /// messenger is older than the stored one and was ignored.
    pub fn receive_messenger(&mut self, m: Messenger) -> Result<bool> {
        if !self.registered.contains(&m.client_id) {
            return Err(Error::Protocol(format!(
                "messenger from unregistered client {}",
                m.client_id
            )));
        }
        if m.shape() != self.reference.labels.dim() {
            return Err(Error::Protocol(format!(
                "messenger from client {} has shape {:?}, reference expects {:?}",
                m.client_id,
                m.shape(),
                self.reference.labels.dim()
            )));
        }
        if let Some(stored) = self.repository.get(m.client_id) {
            if m.round < stored.round {
                log::warn!(
                    "ignoring stale messenger from client {} (round {} < stored {})",
                    m.client_id,
                    m.round,
                    stored.round
                );
                return Ok(false);
            }
        }
        let score = score_quality(&m, &self.reference)?;
        self.scores.insert(m.client_id, score);
        self.repository.latest.insert(m.client_id, m);
        Ok(true)
    }

    /// Applies a batch of messengers in client-id order.
    pub fn receive_batch(&mut self, mut batch: Vec<Messenger>) -> Result<()> {
        batch.sort_by_key(|m| (m.client_id, m.round));
        for m in batch {
            self.receive_messenger(m)?;
        }
        Ok(())
    }

    /// Recomputes the quality set and every communicating client's neighbor
    /// set. Registered clients without a stored messenger get an empty set.
    ///
    /// Random selection draws from a stream keyed by `(selection_seed, round,
    /// client)`, so it is independent of which other clients are present.
    pub fn server_round(
        &mut self,
        config: &ServerConfig,
        selection_seed: u64,
        round: u64,
    ) -> Result<BTreeMap<ClientId, Vec<Messenger>>> {
        config.validate()?;
        let q = if config.quality_filter { config.q } else { usize::MAX };
        self.quality = QualityTable {
            quality_set: select_quality_set(&self.scores, q),
            scores: self.scores.clone(),
        };

        let ids: Vec<ClientId> = self.repository.ids().collect();
        let position: BTreeMap<ClientId, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut weights = Array2::<f64>::zeros((ids.len(), ids.len()));
        let candidates: Vec<&Messenger> = self
            .quality
            .quality_set
            .iter()
            .filter_map(|id| self.repository.get(*id))
            .collect();

        let mut neighbor_sets = BTreeMap::new();
        for &id in &ids {
            let own = &self.repository.latest[&id];
            let ranked = select_neighbors(own, &candidates, usize::MAX)?;
            for n in &ranked {
                weights[(position[&id], position[&n.client_id])] = n.similarity();
            }
            let chosen: Vec<ClientId> = match config.selection {
                SimilaritySelection::Nearest => ranked.iter().take(config.k).map(|n| n.client_id).collect(),
                SimilaritySelection::Random => {
                    let pool: Vec<ClientId> = candidates
                        .iter()
                        .map(|m| m.client_id)
                        .filter(|&c| c != id)
                        .collect();
                    let mut stream = rng::stream2(selection_seed, rng::STREAM_SELECTION, round, u64::from(id));
                    let amount = config.k.min(pool.len());
                    index::sample(&mut stream, pool.len(), amount)
                        .into_iter()
                        .map(|i| pool[i])
                        .collect()
                }
            };
            neighbor_sets.insert(id, chosen);
        }

        let mut out = BTreeMap::new();
        for &id in &self.registered {
            let set = neighbor_sets
                .get(&id)
                .map(|members| members.iter().map(|m| self.repository.latest[m].clone()).collect())
                .unwrap_or_default();
            out.insert(id, set);
        }
        self.graph = CollaborationGraph {
            client_ids: ids,
            weights,
            neighbor_sets,
        };
        Ok(out)
    }

    pub fn snapshot(&self) -> ServerSnapshot {
        ServerSnapshot {
            registered: self.registered.iter().copied().collect(),
            round_received: self.repository.round_received(),
            scores: self.scores.clone(),
            quality_set: self.quality.quality_set.clone(),
            neighbors: self.graph.neighbor_sets.clone(),
            client_ids: self.graph.client_ids.clone(),
            weights: self
                .graph
                .weights
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|&w| if w.is_finite() { Some(w) } else { None }).collect())
                .collect(),
        }
    }

    pub fn snapshot_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.snapshot())?)
    }
}
