//! Per-client training loop.
//!
//! A client owns its model, its fixed train/val/test split and two private
//! random streams (initialization and mini-batch order). Between exchanges it
//! keeps the ensemble mean of the last neighbor set it received; until the
//! first non-empty response it trains on local data only.

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Batch, ModelParams, ModelSpec};
use crate::protocol::{ensemble_mean, generate_messenger, Messenger, ReferenceSet};
use crate::rng::{self, StreamRng};
use crate::server::{Server, ServerConfig};
use crate::ClientId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

fn default_batch_size() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub rho: f64,
    pub eta: f64,
    /// Communication interval `I`: exchange before every `I`-th step.
    pub interval: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub total_iterations: u64,
    /// Use the whole training split for every step.
    #[serde(default)]
    pub full_batch: bool,
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.eta)));
        }
        if self.interval == 0 {
            return Err(Error::Config("communication interval must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.total_iterations == 0 {
            return Err(Error::Config("total iterations must be positive".into()));
        }
        Ok(())
    }
}

/// A client's disjoint train/validation/test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalData {
    pub train: Batch,
    pub val: Batch,
    pub test: Batch,
}

impl LocalData {
    pub fn split(&self, split: Split) -> &Batch {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Accuracy plus macro-averaged precision and recall over all `num_classes`
/// classes; a class with an empty denominator contributes 0.
pub fn classification_metrics(predicted: &[usize], truth: &[usize], num_classes: usize) -> Metrics {
    let mut tp = vec![0usize; num_classes];
    let mut predicted_count = vec![0usize; num_classes];
    let mut actual_count = vec![0usize; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        predicted_count[p] += 1;
        actual_count[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let correct: usize = tp.iter().sum();
    Metrics {
        accuracy: ratio(correct, truth.len()),
        precision: (0..num_classes).map(|c| ratio(tp[c], predicted_count[c])).sum::<f64>() / num_classes as f64,
        recall: (0..num_classes).map(|c| ratio(tp[c], actual_count[c])).sum::<f64>() / num_classes as f64,
    }
}

/// Without-replacement mini-batches, reshuffled every epoch.
#[derive(Debug, Clone)]
struct EpochSampler {
    rng: StreamRng,
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    fn next(&mut self, len: usize, size: usize) -> Vec<usize> {
        if self.order.len() != len || self.cursor >= len {
            self.order = (0..len).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + size).min(len);
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: ClientId,
    pub spec: ModelSpec,
    pub params: ModelParams,
    pub data: LocalData,
    pub last_neighbor_mean: Option<Array2<f64>>,
    pub iteration: u64,
    sampler: EpochSampler,
}

impl ClientState {
    /// Initializes the model from the client's own stream of `seed`.
    pub fn new(client_id: ClientId, spec: ModelSpec, data: LocalData, seed: u64) -> Result<Self> {
        spec.validate()?;
        for split in [Split::Train, Split::Val, Split::Test] {
            let b = data.split(split);
            if b.features.ncols() != spec.input_dim() {
                return Err(Error::dim("client features", spec.input_dim(), b.features.ncols()).for_client(client_id));
            }
            if b.labels.as_ref().is_none_or(|l| l.ncols() != spec.num_classes()) {
                return Err(Error::Config(format!(
                    "client {client_id}: {} split must be labeled with {} classes",
                    split.as_str(),
                    spec.num_classes()
                )));
            }
        }
        if data.train.is_empty() {
            return Err(Error::Config(format!("client {client_id} has no training data")));
        }
        let params = ModelParams::init(&spec, &mut rng::stream(seed, rng::STREAM_INIT, u64::from(client_id)));
        Ok(ClientState {
            client_id,
            spec,
            params,
            data,
            last_neighbor_mean: None,
            iteration: 0,
            sampler: EpochSampler {
                rng: rng::stream(seed, rng::STREAM_SAMPLER, u64::from(client_id)),
                order: Vec::new(),
                cursor: 0,
            },
        })
    }

    /// Whether the upcoming step is preceded by an exchange.
    pub fn due_to_communicate(&self, interval: u64) -> bool {
        (self.iteration + 1) % interval == 0
    }

    pub fn make_messenger(&self, reference: &ReferenceSet, round: u64) -> Result<Messenger> {
        generate_messenger(&self.spec, &self.params, reference, self.client_id, round)
            .map_err(|e| e.for_client(self.client_id))
    }

    /// Replaces the distillation target by the mean of `neighbors`; an empty
    /// set switches the client back to local-only steps.
    pub fn accept_neighbors(&mut self, neighbors: &[Messenger]) -> Result<()> {
        self.last_neighbor_mean = if neighbors.is_empty() {
            None
        } else {
            let refs: Vec<&Messenger> = neighbors.iter().collect();
            Some(ensemble_mean(&refs).map_err(|e| e.for_client(self.client_id))?)
        };
        Ok(())
    }

    /// Sends a messenger, lets the server run a round and takes this client's
    /// neighbor set from it. The simulator batches this across clients instead.
    pub fn communicate(
        &mut self,
        reference: &ReferenceSet,
        server: &mut Server,
        config: &ServerConfig,
        selection_seed: u64,
        round: u64,
    ) -> Result<()> {
        server.receive_messenger(self.make_messenger(reference, round)?)?;
        let mut sets = server.server_round(config, selection_seed, round)?;
        let own = sets.remove(&self.client_id).unwrap_or_default();
        self.accept_neighbors(&own)
    }

    /// One parameter update on a mini-batch (or the full training split).
    pub fn client_step(&mut self, hyper: &TrainHyper, ref_features: &Array2<f64>) -> Result<()> {
        let batch = if hyper.full_batch {
            self.data.train.clone()
        } else {
            let idx = self.sampler.next(self.data.train.len(), hyper.batch_size);
            self.data.train.select(&idx)
        };
        let local_size = batch.len();
        let next = match &self.last_neighbor_mean {
            Some(mean) => nn::sqmd_update(
                &self.spec,
                &self.params,
                &batch,
                ref_features,
                mean,
                hyper.rho,
                hyper.eta,
                local_size,
                ref_features.nrows(),
            ),
            None => nn::local_step(&self.spec, &self.params, &batch, hyper.eta, local_size),
        }
        .map_err(|e| e.for_client(self.client_id))?;
        if !next.to_flat().iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("updated parameters").for_client(self.client_id));
        }
        self.params = next;
        self.iteration += 1;
        Ok(())
    }

    pub fn evaluate(&self, split: Split) -> Result<Metrics> {
        let batch = self.data.split(split);
        if batch.is_empty() {
            return Err(Error::Contract(format!(
                "client {}: cannot evaluate an empty {} split",
                self.client_id,
                split.as_str()
            )));
        }
        let probs = nn::forward(&self.spec, &self.params, &batch.features)?;
        let predicted = nn::argmax_rows(&probs);
        let truth = batch.classes().expect("labeled split");
        Ok(classification_metrics(&predicted, &truth, self.spec.num_classes()))
    }
}
