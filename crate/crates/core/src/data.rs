//! Dataset loading: IDX image containers, CSV tables and seeded synthetic
//! generators, plus per-column normalization.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Features (one row per sample) with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    Minmax,
    Zscore,
}

/// Class-conditional Gaussians with diagonal covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub samples: usize,
    /// Explicit class means; drawn uniformly from `[-separation, separation]`
    /// per coordinate when absent.
    #[serde(default)]
    pub means: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Per-class, per-dimension standard deviations; `std` everywhere when absent.
    #[serde(default)]
    pub stds: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_std")]
    pub std: f64,
    #[serde(default)]
    pub priors: Option<Vec<f64>>,
}

fn default_separation() -> f64 {
    3.0
}

fn default_std() -> f64 {
    1.0
}

/// Concentric rings in the first two dimensions, Gaussian noise elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingsParams {
    pub num_classes: usize,
    pub samples: usize,
    #[serde(default = "default_ring_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_ring_noise")]
    pub noise: f64,
    #[serde(default = "default_std")]
    pub radius_step: f64,
}

fn default_ring_dim() -> usize {
    2
}

fn default_ring_noise() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    IdxImages { images: PathBuf, labels: PathBuf },
    CsvRows { path: PathBuf, label_column: String },
    SyntheticGaussian(GaussianParams),
    SyntheticRings(RingsParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    #[serde(flatten)]
    pub source: DataSource,
    /// Defaults: minmax for images, zscore for CSV, none for synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    /// Overrides the class count inferred from loaded labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_count: Option<usize>,
}

impl DatasetDescriptor {
    pub fn effective_normalization(&self) -> Normalization {
        self.normalization.unwrap_or(match self.source {
            DataSource::IdxImages { .. } => Normalization::Minmax,
            DataSource::CsvRows { .. } => Normalization::Zscore,
            _ => Normalization::None,
        })
    }

    /// Loads or generates the dataset. Relative paths resolve against `base_dir`.
    pub fn load(&self, base_dir: Option<&Path>, seed: u64) -> Result<Dataset> {
        let resolve = |p: &Path| match base_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        };
        let (features, labels, generated_classes) = match &self.source {
            DataSource::IdxImages { images, labels } => {
                let (f, l) = load_idx(&resolve(images), &resolve(labels))?;
                (f, l, None)
            }
            DataSource::CsvRows { path, label_column } => {
                let (f, l) = load_csv(&resolve(path), label_column)?;
                (f, l, None)
            }
            DataSource::SyntheticGaussian(p) => {
                let d = generate_gaussian(p, seed)?;
                (d.features, d.labels, Some(d.num_classes))
            }
            DataSource::SyntheticRings(p) => {
                let d = generate_rings(p, seed)?;
                (d.features, d.labels, Some(d.num_classes))
            }
        };
        let inferred = labels.iter().max().map_or(0, |m| m + 1);
        let num_classes = self.class_count.or(generated_classes).unwrap_or(inferred);
        if inferred > num_classes {
            return Err(Error::Config(format!(
                "label {} exceeds the configured class count {num_classes}",
                inferred - 1
            )));
        }
        let mut features = features;
        normalize(&mut features, self.effective_normalization());
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("normalized features"));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }
}

/// Per-column normalization in place. Constant columns map to 0.
pub fn normalize(features: &mut Array2<f64>, how: Normalization) {
    if features.nrows() == 0 {
        return;
    }
    for mut col in features.columns_mut() {
        match how {
            Normalization::None => {}
            Normalization::Minmax => {
                let min = col.fold(f64::INFINITY, |m, &v| m.min(v));
                let max = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let range = max - min;
                col.mapv_inplace(|v| if range > 0.0 { (v - min) / range } else { 0.0 });
            }
            Normalization::Zscore => {
                let n = col.len() as f64;
                let mean = col.sum() / n;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                col.mapv_inplace(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 });
            }
        }
    }
}

fn read_u32(bytes: &[u8], offset: usize, name: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::ParseBinary {
            source_name: name.to_string(),
            offset: bytes.len(),
            message: "truncated header".into(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, name: &str) -> Result<()> {
    let magic = read_u32(bytes, 0, name)?;
    if magic != expected {
        return Err(Error::ParseBinary {
            source_name: name.to_string(),
            offset: 0,
            message: format!("bad magic number {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

fn check_payload(bytes: &[u8], start: usize, len: usize, name: &str) -> Result<()> {
    if bytes.len() < start + len {
        return Err(Error::ParseBinary {
            source_name: name.to_string(),
            offset: bytes.len(),
            message: format!("truncated payload, expected {} bytes", start + len),
        });
    }
    Ok(())
}

/// Decodes an IDX image file into one row per image, pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], name: &str) -> Result<Array2<f64>> {
    check_magic(bytes, IDX_IMAGES_MAGIC, name)?;
    let count = read_u32(bytes, 4, name)? as usize;
    let rows = read_u32(bytes, 8, name)? as usize;
    let cols = read_u32(bytes, 12, name)? as usize;
    let pixels = rows * cols;
    check_payload(bytes, 16, count * pixels, name)?;
    let data = bytes[16..16 + count * pixels].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Array2::from_shape_vec((count, pixels), data).expect("length checked"))
}

pub fn parse_idx_labels(bytes: &[u8], name: &str) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC, name)?;
    let count = read_u32(bytes, 4, name)? as usize;
    check_payload(bytes, 8, count, name)?;
    Ok(bytes[8..8 + count].iter().map(|&b| usize::from(b)).collect())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<(Array2<f64>, Vec<usize>)> {
    let images = parse_idx_images(&fs::read(images_path)?, &images_path.display().to_string())?;
    let labels = parse_idx_labels(&fs::read(labels_path)?, &labels_path.display().to_string())?;
    if images.nrows() != labels.len() {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            images.nrows(),
            labels.len()
        )));
    }
    Ok((images, labels))
}

fn parse_label(cell: &str) -> Option<usize> {
    let cell = cell.trim();
    if let Ok(v) = cell.parse::<usize>() {
        return Some(v);
    }
    match cell.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.fract() == 0.0 && v.is_finite() => Some(v as usize),
        _ => None,
    }
}

/// Reads a headed numeric CSV; every column except `label_column` is a feature.
pub fn load_csv(path: &Path, label_column: &str) -> Result<(Array2<f64>, Vec<usize>)> {
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::Config(format!("label column '{label_column}' not found in {name}")))?;
    let width = headers.len();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(Error::ParseText {
                source_name: name,
                line,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        for (i, cell) in record.iter().enumerate() {
            if i == label_idx {
                let label = parse_label(cell).ok_or_else(|| Error::ParseText {
                    source_name: name.clone(),
                    line,
                    message: format!("label '{cell}' is not a non-negative integer"),
                })?;
                labels.push(label);
            } else {
                let v: f64 = cell.trim().parse().map_err(|_| Error::ParseText {
                    source_name: name.clone(),
                    line,
                    message: format!("non-numeric cell '{cell}' in column '{}'", &headers[i]),
                })?;
                values.push(v);
            }
        }
    }
    let features = Array2::from_shape_vec((labels.len(), width - 1), values).expect("rectangular by construction");
    Ok((features, labels))
}

/// Splits `total` into per-class counts proportional to `priors`, assigning
/// the remainder by largest fractional part (ties to the lower class).
fn class_counts(priors: &[f64], total: usize) -> Result<Vec<usize>> {
    if priors.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Config("class priors must be finite and non-negative".into()));
    }
    let sum: f64 = priors.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Config("class priors sum to zero".into()));
    }
    let exact: Vec<f64> = priors.iter().map(|p| p / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..priors.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = total - counts.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if priors[c] > 0.0 {
            counts[c] += 1;
            left -= 1;
        }
    }
    if counts.iter().filter(|&&c| c > 0).count() == 1 {
        log::warn!("synthetic priors produce a single-class dataset");
    }
    Ok(counts)
}

fn shuffled_labels<R: Rng>(counts: &[usize], rng: &mut R) -> Vec<usize> {
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
    labels.shuffle(rng);
    labels
}

pub fn generate_gaussian(p: &GaussianParams, seed: u64) -> Result<Dataset> {
    if p.num_classes == 0 || p.feature_dim == 0 {
        return Err(Error::Config("gaussian generator needs at least one class and one dimension".into()));
    }
    let mut stream = rng::stream(seed, rng::STREAM_DATA, 0);
    let means = match &p.means {
        Some(m) => {
            if m.len() != p.num_classes || m.iter().any(|row| row.len() != p.feature_dim) {
                return Err(Error::Config("class means must be num_classes × feature_dim".into()));
            }
            m.clone()
        }
        None => (0..p.num_classes)
            .map(|_| {
                (0..p.feature_dim)
                    .map(|_| stream.random_range(-p.separation..=p.separation))
                    .collect()
            })
            .collect(),
    };
    let stds = match &p.stds {
        Some(s) => {
            if s.len() != p.num_classes || s.iter().any(|row| row.len() != p.feature_dim) {
                return Err(Error::Config("class stds must be num_classes × feature_dim".into()));
            }
            s.clone()
        }
        None => vec![vec![p.std; p.feature_dim]; p.num_classes],
    };
    if stds.iter().flatten().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Config("degenerate covariance: standard deviations must be positive".into()));
    }
    let priors = p.priors.clone().unwrap_or_else(|| vec![1.0; p.num_classes]);
    if priors.len() != p.num_classes {
        return Err(Error::Config("one prior per class required".into()));
    }
    let labels = shuffled_labels(&class_counts(&priors, p.samples)?, &mut stream);
    let mut features = Array2::zeros((labels.len(), p.feature_dim));
    for (mut row, &c) in features.rows_mut().into_iter().zip(&labels) {
        for (j, v) in row.iter_mut().enumerate() {
            let z: f64 = stream.sample(StandardNormal);
            *v = means[c][j] + stds[c][j] * z;
        }
    }
    Ok(Dataset {
        features,
        labels,
        num_classes: p.num_classes,
    })
}

pub fn generate_rings(p: &RingsParams, seed: u64) -> Result<Dataset> {
    if p.num_classes == 0 || p.feature_dim < 2 {
        return Err(Error::Config("rings need at least one class and two dimensions".into()));
    }
    if !(p.noise.is_finite() && p.noise > 0.0 && p.radius_step > 0.0) {
        return Err(Error::Config("degenerate covariance: ring noise and radius step must be positive".into()));
    }
    let mut stream = rng::stream(seed, rng::STREAM_DATA, 1);
    let labels = shuffled_labels(&class_counts(&vec![1.0; p.num_classes], p.samples)?, &mut stream);
    let mut features = Array2::zeros((labels.len(), p.feature_dim));
    for (mut row, &c) in features.rows_mut().into_iter().zip(&labels) {
        let angle = stream.random_range(0.0..std::f64::consts::TAU);
        let z: f64 = stream.sample(StandardNormal);
        let radius = (c + 1) as f64 * p.radius_step + p.noise * z;
        row[0] = radius * angle.cos();
        row[1] = radius * angle.sin();
        for v in row.iter_mut().skip(2) {
            let z: f64 = stream.sample(StandardNormal);
            *v = p.noise * z;
        }
    }
    Ok(Dataset {
        features,
        labels,
        num_classes: p.num_classes,
    })
}
