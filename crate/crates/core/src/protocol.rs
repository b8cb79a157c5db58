//! Messengers and the server-side mathematics built on them.
//!
//! A messenger is a client's soft-decision matrix on the shared reference
//! features. The server grades it against the reference labels (summed
//! cross-entropy, lower is better), keeps the `q` best clients as the quality
//! set, and ranks candidates for each client by the divergence
//! `d(n, m) = (1/R) Σ_j KL(s_n[j] ‖ s_m[j])`, querying client first.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Batch, ModelParams, ModelSpec, PROB_EPS};
use crate::ClientId;

/// The shared reference features plus the labels only the server holds.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub features: Array2<f64>,
    pub labels: Array2<f64>,
}

impl ReferenceSet {
    /// Builds a reference set, rejecting class counts that differ by more
    /// than one sample.
    pub fn new(features: Array2<f64>, classes: &[usize], num_classes: usize) -> Result<Self> {
        if classes.len() != features.nrows() {
            return Err(Error::dim("reference labels", features.nrows(), classes.len()));
        }
        let mut counts = vec![0usize; num_classes];
        for &c in classes {
            if c >= num_classes {
                return Err(Error::Contract(format!("reference label {c} outside [0, {num_classes})")));
            }
            counts[c] += 1;
        }
        let (min, max) = (
            counts.iter().copied().min().unwrap_or(0),
            counts.iter().copied().max().unwrap_or(0),
        );
        if max - min > 1 {
            return Err(Error::Config(format!(
                "reference set is not class-balanced (per-class counts {counts:?})"
            )));
        }
        Ok(ReferenceSet {
            labels: nn::one_hot(classes, num_classes)?,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.labels.ncols()
    }
}

/// A client's soft decisions on the reference features.
#[derive(Debug, Clone, PartialEq)]
pub struct Messenger {
    pub client_id: ClientId,
    pub round: u64,
    pub soft_decisions: Array2<f64>,
}

impl Messenger {
    pub fn new(client_id: ClientId, round: u64, soft_decisions: Array2<f64>) -> Result<Self> {
        for row in soft_decisions.rows() {
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (row.sum() - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!(
                    "messenger from client {client_id} has a row that is not a probability vector"
                )));
            }
        }
        Ok(Messenger {
            client_id,
            round,
            soft_decisions,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.soft_decisions.dim()
    }
}

/// Per-client quality scores and the derived quality set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityTable {
    pub scores: BTreeMap<ClientId, f64>,
    pub quality_set: Vec<ClientId>,
}

impl QualityTable {
    pub fn build(scores: BTreeMap<ClientId, f64>, q: usize) -> Self {
        let quality_set = select_quality_set(&scores, q);
        QualityTable { scores, quality_set }
    }

    pub fn contains(&self, id: ClientId) -> bool {
        self.quality_set.contains(&id)
    }
}

/// One selected neighbor with the divergence it was ranked by.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub client_id: ClientId,
    pub divergence: f64,
}

impl Neighbor {
    /// `1 / d`; a zero divergence yields `+∞`, which ranks first.
    pub fn similarity(&self) -> f64 {
        if self.divergence == 0.0 {
            f64::INFINITY
        } else {
            1.0 / self.divergence
        }
    }
}

/// Directed collaboration graph of one server round.
///
/// `weights[(i, j)]` is the similarity from `client_ids[i]` to `client_ids[j]`
/// for every candidate that was ranked, and 0 where no edge was considered.
#[derive(Debug, Clone, PartialEq)]
pub struct CollaborationGraph {
    pub client_ids: Vec<ClientId>,
    pub weights: Array2<f64>,
    pub neighbor_sets: BTreeMap<ClientId, Vec<ClientId>>,
}

impl Default for CollaborationGraph {
    fn default() -> Self {
        CollaborationGraph {
            client_ids: Vec::new(),
            weights: Array2::zeros((0, 0)),
            neighbor_sets: BTreeMap::new(),
        }
    }
}

pub fn generate_messenger(
    spec: &ModelSpec,
    params: &ModelParams,
    reference: &ReferenceSet,
    client_id: ClientId,
    round: u64,
) -> Result<Messenger> {
    let soft_decisions = nn::forward(spec, params, &reference.features)?;
    Ok(Messenger {
        client_id,
        round,
        soft_decisions,
    })
}

/// Summed clamped cross-entropy of the messenger against the reference labels.
pub fn score_quality(messenger: &Messenger, reference: &ReferenceSet) -> Result<f64> {
    if messenger.shape() != reference.labels.dim() {
        return Err(Error::dim(
            "messenger vs reference",
            format!("{:?}", reference.labels.dim()),
            format!("{:?}", messenger.shape()),
        ));
    }
    nn::cross_entropy(&messenger.soft_decisions, &reference.labels)
}

fn by_score_then_id(a: &(ClientId, f64), b: &(ClientId, f64)) -> Ordering {
    a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))
}

/// The `min(q, N)` clients with the lowest scores, ascending by score with
/// ties broken by ascending id.
pub fn select_quality_set(scores: &BTreeMap<ClientId, f64>, q: usize) -> Vec<ClientId> {
    let mut ranked: Vec<(ClientId, f64)> = scores.iter().map(|(&id, &s)| (id, s)).collect();
    ranked.sort_by(by_score_then_id);
    ranked.into_iter().take(q).map(|(id, _)| id).collect()
}

fn normalized_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.mapv(|v| v.max(PROB_EPS));
    for mut row in out.rows_mut() {
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean per-row KL divergence `KL(a ‖ b)` over the reference rows, after
/// clamping both inputs to `PROB_EPS` and renormalizing.
pub fn messenger_divergence(a: &Messenger, b: &Messenger) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "messenger pair",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let rows = a.shape().0;
    if rows == 0 {
        return Ok(0.0);
    }
    let p = normalized_rows(&a.soft_decisions);
    let q = normalized_rows(&b.soft_decisions);
    let total: f64 = p.iter().zip(q.iter()).map(|(&p, &q)| p * (p / q).ln()).sum();
    Ok((total / rows as f64).max(0.0))
}

/// Ranks the candidates by divergence from `own` and keeps the closest `k`.
/// `own`'s client is never its own neighbor.
pub fn select_neighbors(own: &Messenger, candidates: &[&Messenger], k: usize) -> Result<Vec<Neighbor>> {
    let mut ranked = Vec::with_capacity(candidates.len());
    for m in candidates.iter().filter(|m| m.client_id != own.client_id) {
        ranked.push(Neighbor {
            client_id: m.client_id,
            divergence: messenger_divergence(own, m)?,
        });
    }
    ranked.sort_by(|a, b| a.divergence.total_cmp(&b.divergence).then(a.client_id.cmp(&b.client_id)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Element-wise mean of the neighbors' soft decisions.
pub fn ensemble_mean(neighbors: &[&Messenger]) -> Result<Array2<f64>> {
    let first = neighbors
        .first()
        .ok_or_else(|| Error::Contract("ensemble of an empty neighbor set".into()))?;
    let mut sum = Array2::<f64>::zeros(first.shape());
    for m in neighbors {
        if m.shape() != first.shape() {
            return Err(Error::dim(
                "ensemble members",
                format!("{:?}", first.shape()),
                format!("{:?}", m.shape()),
            ));
        }
        sum += &m.soft_decisions;
    }
    Ok(sum / neighbors.len() as f64)
}

/// A client's model and local training data, as seen by the convergence
/// diagnostic.
#[derive(Debug, Clone, Copy)]
pub struct ClientModel<'a> {
    pub client_id: ClientId,
    pub spec: &'a ModelSpec,
    pub params: &'a ModelParams,
    pub local: &'a Batch,
}

/// Norm of `∇(Σ_local ℓ + ρ·Σ_ref ‖φ − mean of neighbors' current outputs‖²)`
/// for every client. Zero at a distillation stationary point.
pub fn stationarity_residual(
    clients: &[ClientModel<'_>],
    ref_features: &Array2<f64>,
    rho: f64,
    neighbors: &BTreeMap<ClientId, Vec<ClientId>>,
) -> Result<BTreeMap<ClientId, f64>> {
    let mut outputs = BTreeMap::new();
    for c in clients {
        outputs.insert(c.client_id, nn::forward(c.spec, c.params, ref_features)?);
    }
    let mut residuals = BTreeMap::new();
    for c in clients {
        let (mut grad, _) = nn::backward_local(c.spec, c.params, c.local)?;
        let members = neighbors.get(&c.client_id).map(Vec::as_slice).unwrap_or(&[]);
        if rho > 0.0 && !members.is_empty() {
            let mut mean = Array2::<f64>::zeros((ref_features.nrows(), c.spec.num_classes()));
            for id in members {
                let out = outputs
                    .get(id)
                    .ok_or_else(|| Error::Protocol(format!("neighbor {id} has no model in the snapshot")))?;
                mean += out;
            }
            mean /= members.len() as f64;
            let (g_ref, _) = nn::backward_reference(c.spec, c.params, ref_features, &mean)?;
            grad.add_scaled(rho, &g_ref);
        }
        residuals.insert(c.client_id, grad.norm());
    }
    Ok(residuals)
}

/// Per-row sums, used by callers that check probability rows.
pub fn row_sums(m: &Array2<f64>) -> Vec<f64> {
    m.sum_axis(Axis(1)).to_vec()
}
