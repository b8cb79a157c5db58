//! Parameter sweeps over a fixed base configuration.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{run_simulation, Protocol, RunRecord, SimConfig};
use crate::error::{Error, Result};
use crate::server::SimilaritySelection;

/// Fields a sweep may vary. Everything else must be identical across runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepField {
    K,
    Q,
    Rho,
    Sparsity,
    Protocol,
    Seed,
    Interval,
    QualityFilter,
    Selection,
}

impl SweepField {
    pub const ALL: [SweepField; 9] = [
        SweepField::K,
        SweepField::Q,
        SweepField::Rho,
        SweepField::Sparsity,
        SweepField::Protocol,
        SweepField::Seed,
        SweepField::Interval,
        SweepField::QualityFilter,
        SweepField::Selection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepField::K => "k",
            SweepField::Q => "q",
            SweepField::Rho => "rho",
            SweepField::Sparsity => "sparsity",
            SweepField::Protocol => "protocol",
            SweepField::Seed => "seed",
            SweepField::Interval => "interval",
            SweepField::QualityFilter => "quality_filter",
            SweepField::Selection => "selection",
        }
    }

    fn get(self, c: &SimConfig) -> Value {
        match self {
            SweepField::K => c.server.k.into(),
            SweepField::Q => c.server.q.into(),
            SweepField::Rho => c.hyper.rho.into(),
            SweepField::Sparsity => c.sparsity.into(),
            SweepField::Protocol => c.protocol.as_str().into(),
            SweepField::Seed => c.seed.into(),
            SweepField::Interval => c.hyper.interval.into(),
            SweepField::QualityFilter => c.server.quality_filter.into(),
            SweepField::Selection => serde_json::to_value(c.server.selection).expect("enum serializes"),
        }
    }

    fn set(self, c: &mut SimConfig, v: &Value) -> Result<()> {
        let bad = || Error::Config(format!("invalid value {v} for sweep field '{}'", self.name()));
        let as_u64 = || v.as_u64().ok_or_else(bad);
        match self {
            SweepField::K => c.server.k = as_u64()? as usize,
            SweepField::Q => c.server.q = as_u64()? as usize,
            SweepField::Rho => c.hyper.rho = v.as_f64().ok_or_else(bad)?,
            SweepField::Sparsity => c.sparsity = v.as_f64().ok_or_else(bad)?,
            SweepField::Protocol => c.protocol = v.as_str().ok_or_else(bad)?.parse::<Protocol>()?,
            SweepField::Seed => c.seed = as_u64()?,
            SweepField::Interval => c.hyper.interval = as_u64()?,
            SweepField::QualityFilter => c.server.quality_filter = v.as_bool().ok_or_else(bad)?,
            SweepField::Selection => {
                c.server.selection = serde_json::from_value::<SimilaritySelection>(v.clone()).map_err(|_| bad())?
            }
        }
        Ok(())
    }

    fn display(self, c: &SimConfig) -> String {
        match self.get(c) {
            Value::String(s) => s,
            other => other.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub field: SweepField,
    pub values: Vec<Value>,
}

/// A base configuration and the axes whose cartesian product is run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: SimConfig,
    pub axes: Vec<SweepAxis>,
}

impl SweepSpec {
    pub fn expand(&self) -> Result<Vec<SimConfig>> {
        let mut configs = vec![self.base.clone()];
        for axis in &self.axes {
            if axis.values.is_empty() {
                return Err(Error::Config(format!("sweep axis '{}' has no values", axis.field.name())));
            }
            let mut next = Vec::with_capacity(configs.len() * axis.values.len());
            for c in &configs {
                for v in &axis.values {
                    let mut c = c.clone();
                    axis.field.set(&mut c, v)?;
                    next.push(c);
                }
            }
            configs = next;
        }
        for c in &configs {
            c.validate()?;
        }
        Ok(configs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    /// Value of every swept field for this run.
    pub swept: BTreeMap<String, String>,
    pub config_hash: String,
    pub mean_accuracy: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub fields: Vec<SweepField>,
    pub records: Vec<RunRecord>,
    pub table: Vec<ComparisonRow>,
}

/// Fields that differ somewhere in `configs`; errors if anything outside the
/// sweepable set differs.
fn swept_fields(configs: &[SimConfig]) -> Result<Vec<SweepField>> {
    let Some(base) = configs.first() else {
        return Err(Error::Config("a sweep needs at least one configuration".into()));
    };
    let fields: Vec<SweepField> = SweepField::ALL
        .into_iter()
        .filter(|f| configs.iter().any(|c| f.get(c) != f.get(base)))
        .collect();
    for (i, c) in configs.iter().enumerate() {
        let mut normalized = c.clone();
        for f in SweepField::ALL {
            f.set(&mut normalized, &f.get(base))?;
        }
        normalized.name = base.name.clone();
        if normalized != *base {
            return Err(Error::Config(format!(
                "configuration {i} differs from the first in a field that cannot be swept"
            )));
        }
    }
    Ok(fields)
}

/// Runs every configuration and tabulates the final test metrics.
pub fn sweep(configs: &[SimConfig], base_dir: Option<&Path>) -> Result<SweepResult> {
    let fields = swept_fields(configs)?;
    let mut records = Vec::with_capacity(configs.len());
    let mut table = Vec::with_capacity(configs.len());
    for c in configs {
        let record = run_simulation(c, base_dir)?;
        table.push(ComparisonRow {
            swept: fields.iter().map(|f| (f.name().to_string(), f.display(c))).collect(),
            config_hash: record.config_hash.clone(),
            mean_accuracy: record.summary.mean_accuracy,
            mean_precision: record.summary.mean_precision,
            mean_recall: record.summary.mean_recall,
        });
        records.push(record);
    }
    Ok(SweepResult { fields, records, table })
}
