//! Run records and their CSV export.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::sweep::ComparisonRow;
use super::Protocol;
use crate::client::Split;
use crate::error::Result;
use crate::ClientId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client_id: ClientId,
    pub split: Split,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    /// Latest quality score held by the server, if any.
    pub quality_score: Option<f64>,
    pub in_q: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality_set: Option<Vec<ClientId>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub neighbors: BTreeMap<ClientId, Vec<ClientId>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub metrics: Vec<ClientMetrics>,
}

impl RoundRecord {
    pub fn is_empty(&self) -> bool {
        self.quality_set.is_none() && self.neighbors.is_empty() && self.metrics.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean_accuracy: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    /// Final test metrics of every client that took part.
    pub final_metrics: Vec<ClientMetrics>,
}

impl Summary {
    pub fn from_metrics(final_metrics: Vec<ClientMetrics>) -> Self {
        let n = final_metrics.len().max(1) as f64;
        let mean = |f: fn(&ClientMetrics) -> f64| final_metrics.iter().map(f).sum::<f64>() / n;
        Summary {
            mean_accuracy: mean(|m| m.accuracy),
            mean_precision: mean(|m| m.precision),
            mean_recall: mean(|m| m.recall),
            final_metrics,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub protocol: Protocol,
    pub num_clients: usize,
    pub rounds: Vec<RoundRecord>,
    pub summary: Summary,
}

impl RunRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Mean accuracy over `clients` at the recorded round `round` (test split).
    pub fn mean_accuracy_at(&self, round: u64, clients: &[ClientId]) -> Option<f64> {
        let r = self.rounds.iter().find(|r| r.round == round)?;
        let acc: Vec<f64> = r
            .metrics
            .iter()
            .filter(|m| m.split == Split::Test && clients.contains(&m.client_id))
            .map(|m| m.accuracy)
            .collect();
        (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64)
    }
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    round: u64,
    client_id: ClientId,
    protocol: &'a str,
    split: &'a str,
    accuracy: f64,
    precision: f64,
    recall: f64,
    quality_score: Option<f64>,
    #[serde(rename = "in_Q")]
    in_q: bool,
}

/// One row per recorded (round, client, split).
pub fn write_metrics_csv<W: Write>(record: &RunRecord, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in &record.rounds {
        for m in &r.metrics {
            w.serialize(MetricsRow {
                round: r.round,
                client_id: m.client_id,
                protocol: record.protocol.as_str(),
                split: m.split.as_str(),
                accuracy: m.accuracy,
                precision: m.precision,
                recall: m.recall,
                quality_score: m.quality_score,
                in_q: m.in_q,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Comparison table with one column per swept field.
pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let keys: Vec<&String> = rows.first().map(|r| r.swept.keys().collect()).unwrap_or_default();
    let mut header: Vec<&str> = keys.iter().map(|k| k.as_str()).collect();
    header.extend(["mean_accuracy", "mean_precision", "mean_recall"]);
    w.write_record(&header)?;
    for row in rows {
        let mut fields: Vec<String> = keys.iter().map(|k| row.swept.get(*k).cloned().unwrap_or_default()).collect();
        fields.extend([row.mean_accuracy, row.mean_precision, row.mean_recall].map(|v| v.to_string()));
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}
