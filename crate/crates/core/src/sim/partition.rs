//! Splitting a dataset into client slices and a class-balanced reference slice.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;

fn default_concentration() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum PartitionPolicy {
    /// Equal-size uniformly random slices.
    EvenRandom,
    /// Equal-size slices, each with every sample of one random class removed.
    ClassRemoval,
    /// Clients are grouped into contiguous clusters; each cluster favors its
    /// own subset of classes, drawn from a seeded permutation.
    ClusterSkew {
        clusters: usize,
        classes_per_cluster: usize,
        /// Probability that a sample is drawn from the cluster's classes.
        #[serde(default = "default_concentration")]
        concentration: f64,
    },
}

impl PartitionPolicy {
    pub fn validate(&self, num_clients: usize) -> Result<()> {
        if let PartitionPolicy::ClusterSkew {
            clusters,
            classes_per_cluster,
            concentration,
        } = self
        {
            if *clusters == 0 || *clusters > num_clients {
                return Err(Error::Config(format!(
                    "cluster count {clusters} must lie in [1, {num_clients}]"
                )));
            }
            if *classes_per_cluster == 0 {
                return Err(Error::Config("classes_per_cluster must be positive".into()));
            }
            if !(0.0..=1.0).contains(concentration) {
                return Err(Error::Config("concentration must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Cluster of each client: contiguous, balanced blocks of ids.
pub fn cluster_of(client: usize, clusters: usize, num_clients: usize) -> usize {
    client * clusters / num_clients
}

/// Classes favored by each cluster.
pub fn cluster_classes(clusters: usize, classes_per_cluster: usize, num_classes: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..num_classes).collect();
    perm.shuffle(&mut rng::stream(seed, rng::STREAM_PARTITION, 1));
    (0..clusters)
        .map(|j| {
            let mut cls: Vec<usize> = (0..classes_per_cluster.min(num_classes))
                .map(|t| perm[(j * classes_per_cluster + t) % num_classes])
                .collect();
            cls.sort_unstable();
            cls.dedup();
            cls
        })
        .collect()
}

/// Client slices plus the reference slice, as indices into the source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
    pub reference: Vec<usize>,
}

impl Partition {
    pub fn materialize(&self, data: &Dataset) -> (Vec<Dataset>, Dataset) {
        (
            self.clients.iter().map(|idx| data.select(idx)).collect(),
            data.select(&self.reference),
        )
    }
}

/// Per class, the indices of `labels` in seeded random order.
fn shuffled_by_class<R: Rng>(labels: &[usize], num_classes: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for v in &mut by_class {
        v.shuffle(rng);
    }
    by_class
}

/// Takes the same number of samples from every class that occurs in `data`.
pub fn balanced_subset(data: &Dataset, per_class: usize, seed: u64) -> Vec<usize> {
    let mut stream = rng::stream(seed, rng::STREAM_PARTITION, 2);
    let by_class = shuffled_by_class(&data.labels, data.num_classes, &mut stream);
    let mut out: Vec<usize> = by_class.iter().flat_map(|v| v.iter().take(per_class).copied()).collect();
    out.sort_unstable();
    out
}

/// Splits `data` into `num_clients` slices according to `policy`, after
/// setting aside a class-balanced reference slice of roughly
/// `reference_fraction` of all samples.
pub fn partition_dataset(
    data: &Dataset,
    policy: &PartitionPolicy,
    num_clients: usize,
    reference_fraction: f64,
    seed: u64,
) -> Result<Partition> {
    policy.validate(num_clients)?;
    if !(0.0..1.0).contains(&reference_fraction) {
        return Err(Error::Config(format!(
            "reference fraction must lie in [0, 1), got {reference_fraction}"
        )));
    }
    let classes = data.num_classes;
    let mut stream = rng::stream(seed, rng::STREAM_PARTITION, 0);
    let mut by_class = shuffled_by_class(&data.labels, classes, &mut stream);

    let mut reference = Vec::new();
    if reference_fraction > 0.0 {
        let wanted = ((reference_fraction * data.len() as f64) / classes as f64).floor() as usize;
        let available = by_class.iter().map(Vec::len).min().unwrap_or(0);
        let per_class = wanted.min(available);
        if per_class == 0 {
            return Err(Error::Config(
                "reference fraction leaves no sample for at least one class".into(),
            ));
        }
        for v in &mut by_class {
            reference.extend(v.drain(..per_class));
        }
        reference.sort_unstable();
    }

    let slice_size = by_class.iter().map(Vec::len).sum::<usize>() / num_clients.max(1);
    if num_clients == 0 || slice_size == 0 {
        return Err(Error::Config(format!(
            "not enough samples for {num_clients} non-empty client slices"
        )));
    }

    let clients = match policy {
        PartitionPolicy::EvenRandom | PartitionPolicy::ClassRemoval => {
            let mut pool: Vec<usize> = by_class.into_iter().flatten().collect();
            pool.sort_unstable();
            pool.shuffle(&mut stream);
            let mut slices: Vec<Vec<usize>> = pool.chunks(slice_size).take(num_clients).map(<[usize]>::to_vec).collect();
            if let PartitionPolicy::ClassRemoval = policy {
                for (client, slice) in slices.iter_mut().enumerate() {
                    let removed = rng::stream(seed, rng::STREAM_PARTITION, 100 + client as u64).random_range(0..classes);
                    slice.retain(|&i| data.labels[i] != removed);
                    if slice.is_empty() {
                        return Err(Error::Config(format!(
                            "class removal emptied the slice of client {client}"
                        )));
                    }
                }
            }
            slices
        }
        PartitionPolicy::ClusterSkew {
            clusters,
            classes_per_cluster,
            concentration,
        } => {
            let favored = cluster_classes(*clusters, *classes_per_cluster, classes, seed);
            let mut slices = vec![Vec::with_capacity(slice_size); num_clients];
            let mut open = vec![true; num_clients];
            // Round-robin, one draw per client per pass, so no client drains a
            // class before the others had their turn.
            for _ in 0..slice_size {
                for client in 0..num_clients {
                    if !open[client] {
                        continue;
                    }
                    let own = &favored[cluster_of(client, *clusters, num_clients)];
                    let drawn = if stream.random::<f64>() < *concentration {
                        own[stream.random_range(0..own.len())]
                    } else {
                        stream.random_range(0..classes)
                    };
                    let fallback = || {
                        own.iter().copied().find(|&c| !by_class[c].is_empty()).or_else(|| {
                            if *concentration < 1.0 {
                                (0..classes).find(|&c| !by_class[c].is_empty())
                            } else {
                                None
                            }
                        })
                    };
                    let class = if by_class[drawn].is_empty() { fallback() } else { Some(drawn) };
                    match class.and_then(|c| by_class[c].pop()) {
                        Some(i) => slices[client].push(i),
                        None => open[client] = false,
                    }
                }
            }
            for (client, s) in slices.iter_mut().enumerate() {
                if s.is_empty() {
                    return Err(Error::Config(format!("client {client} received an empty slice")));
                }
                s.sort_unstable();
            }
            slices
        }
    };
    Ok(Partition { clients, reference })
}

/// Keeps `⌈r% · n⌉` samples, chosen uniformly without replacement.
pub fn sparsify(slice: &Dataset, r: f64, seed: u64, client: u64) -> Result<Dataset> {
    if !(r > 0.0 && r <= 100.0) {
        return Err(Error::Config(format!("sparsity must lie in (0, 100], got {r}")));
    }
    if r == 100.0 {
        return Ok(slice.clone());
    }
    let keep = ((r / 100.0) * slice.len() as f64).ceil() as usize;
    let keep = keep.min(slice.len());
    if keep == 0 {
        return Err(Error::Config("sparsification left no samples".into()));
    }
    let mut idx = index::sample(&mut rng::stream(seed, rng::STREAM_SPARSIFY, client), slice.len(), keep).into_vec();
    idx.sort_unstable();
    Ok(slice.select(&idx))
}

/// Train/validation/test index split with ratio 8:1:1 (floors for train and
/// validation, remainder to test).
pub fn split_811(n: usize, seed: u64, client: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, rng::STREAM_SPLIT, client));
    let train = n * 8 / 10;
    let val = n / 10;
    let test = idx.split_off(train + val);
    let val_idx = idx.split_off(train);
    (idx, val_idx, test)
}
