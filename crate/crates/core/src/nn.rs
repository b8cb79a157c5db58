//! Dense feed-forward classifiers with softmax output.
//!
//! Weights are stored `(fan_in × fan_out)` so a batch forward pass is
//! `X · W + b`. Only the two losses the protocol needs are differentiated:
//! summed cross-entropy over a labeled batch and the squared disagreement
//! between the model's soft decisions and a target matrix on the reference
//! features.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1]` before logarithms and ratios.
pub const PROB_EPS: f64 = 1e-12;

/// Hidden-layer nonlinearity. The output layer is always softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
        }
    }

    /// Multiplies `delta` by the derivative, expressed through the
    /// post-activation value `a`.
    fn backprop(self, delta: &mut Array2<f64>, a: &Array2<f64>) {
        match self {
            Activation::Relu => Zip::from(delta).and(a).for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }),
            Activation::Tanh => Zip::from(delta).and(a).for_each(|d, &a| *d *= 1.0 - a * a),
        }
    }
}

/// Architecture of one client model: `layer_sizes[0]` is the feature
/// dimension, the last entry is the class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub spec_id: String,
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn new(spec_id: impl Into<String>, layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = ModelSpec {
            spec_id: spec_id.into(),
            layer_sizes,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "model spec '{}' needs at least an input and an output size",
                self.spec_id
            )));
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!(
                "model spec '{}' has a zero-width layer",
                self.spec_id
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// One affine layer; also used for the matching gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer {
            weights: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.weights.iter().copied());
        out.extend(l.bias.iter().copied());
    }
    out
}

fn check_layers(spec: &ModelSpec, layers: &[Layer], context: &'static str) -> Result<()> {
    if layers.len() != spec.num_layers() {
        return Err(Error::dim(context, spec.num_layers(), layers.len()));
    }
    for (l, w) in layers.iter().zip(spec.layer_sizes.windows(2)) {
        if l.weights.dim() != (w[0], w[1]) || l.bias.len() != w[1] {
            return Err(Error::dim(
                context,
                format!("{}x{} + {}", w[0], w[1], w[1]),
                format!("{}x{} + {}", l.weights.nrows(), l.weights.ncols(), l.bias.len()),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
}

impl ModelParams {
    pub fn zeros(spec: &ModelSpec) -> Self {
        ModelParams {
            layers: spec.layer_sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Self {
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let weights = Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-limit..=limit));
                Layer {
                    weights,
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        ModelParams { layers }
    }

    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        check_layers(spec, &self.layers, "model parameters")?;
        if !self.values_iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("model parameters"));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn values_iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    /// All parameters in layer order, weights (row-major) before bias.
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    /// `self += alpha * grads`
    pub fn add_scaled(&mut self, alpha: f64, grads: &Gradients) {
        for (p, g) in self.layers.iter_mut().zip(&grads.layers) {
            p.weights.scaled_add(alpha, &g.weights);
            p.bias.scaled_add(alpha, &g.bias);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.scaled_add(alpha, &b.weights);
            a.bias.scaled_add(alpha, &b.bias);
        }
    }
}

/// Features with optional one-hot labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Array2<f64>,
    pub labels: Option<Array2<f64>>,
}

impl Batch {
    pub fn labeled(features: Array2<f64>, labels: Array2<f64>) -> Result<Self> {
        if labels.nrows() != features.nrows() {
            return Err(Error::dim("batch labels", features.nrows(), labels.nrows()));
        }
        for row in labels.rows() {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(Error::Contract("label rows must be one-hot".into()));
            }
        }
        Ok(Batch {
            features,
            labels: Some(labels),
        })
    }

    pub fn unlabeled(features: Array2<f64>) -> Self {
        Batch { features, labels: None }
    }

    pub fn from_classes(features: Array2<f64>, classes: &[usize], num_classes: usize) -> Result<Self> {
        if classes.len() != features.nrows() {
            return Err(Error::dim("batch labels", features.nrows(), classes.len()));
        }
        Ok(Batch {
            labels: Some(one_hot(classes, num_classes)?),
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Class index per row, if labeled.
    pub fn classes(&self) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| argmax_rows(l))
    }

    /// Rows selected by `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            features: self.features.select(Axis(0), idx),
            labels: self.labels.as_ref().map(|l| l.select(Axis(0), idx)),
        }
    }
}

pub fn one_hot(classes: &[usize], num_classes: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((classes.len(), num_classes));
    for (i, &c) in classes.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::Contract(format!("label {c} outside [0, {num_classes})")));
        }
        out[[i, c]] = 1.0;
    }
    Ok(out)
}

/// First index of the maximum in each row.
pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Inputs to every layer plus the final probabilities.
struct Trace {
    inputs: Vec<Array2<f64>>,
    probs: Array2<f64>,
}

fn check_inputs(spec: &ModelSpec, params: &ModelParams, features: &Array2<f64>) -> Result<()> {
    params.check(spec)?;
    if features.ncols() != spec.input_dim() {
        return Err(Error::dim("feature columns", spec.input_dim(), features.ncols()));
    }
    if !features.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("input features"));
    }
    Ok(())
}

fn forward_trace(spec: &ModelSpec, params: &ModelParams, features: &Array2<f64>) -> Trace {
    let last = params.layers.len() - 1;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut current = features.to_owned();
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = current.dot(&layer.weights);
        z += &layer.bias;
        inputs.push(current);
        if i == last {
            softmax_rows(&mut z);
        } else {
            spec.activation.apply(&mut z);
        }
        current = z;
    }
    Trace { inputs, probs: current }
}

fn backprop(spec: &ModelSpec, params: &ModelParams, trace: &Trace, mut delta: Array2<f64>) -> Gradients {
    let mut layers: Vec<Layer> = Vec::with_capacity(params.layers.len());
    for l in (0..params.layers.len()).rev() {
        let input = &trace.inputs[l];
        let weights = input.t().dot(&delta);
        let bias = delta.sum_axis(Axis(0));
        if l > 0 {
            let mut next = delta.dot(&params.layers[l].weights.t());
            spec.activation.backprop(&mut next, input);
            delta = next;
        }
        layers.push(Layer { weights, bias });
    }
    layers.reverse();
    Gradients { layers }
}

/// Soft decisions (`B × C`) of the model on `features`.
pub fn forward(spec: &ModelSpec, params: &ModelParams, features: &Array2<f64>) -> Result<Array2<f64>> {
    check_inputs(spec, params, features)?;
    Ok(forward_trace(spec, params, features).probs)
}

/// Summed cross-entropy, `Σ −ln p[i, label_i]`, with clamped probabilities.
pub fn cross_entropy(probs: &Array2<f64>, labels: &Array2<f64>) -> Result<f64> {
    if probs.dim() != labels.dim() {
        return Err(Error::dim(
            "cross-entropy operands",
            format!("{:?}", labels.dim()),
            format!("{:?}", probs.dim()),
        ));
    }
    Ok(probs
        .rows()
        .into_iter()
        .zip(argmax_rows(labels))
        .map(|(row, c)| -row[c].clamp(PROB_EPS, 1.0).ln())
        .sum())
}

/// Gradient and value of the summed local cross-entropy.
pub fn backward_local(spec: &ModelSpec, params: &ModelParams, batch: &Batch) -> Result<(Gradients, f64)> {
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("local gradient needs a labeled batch".into()))?;
    check_inputs(spec, params, &batch.features)?;
    if labels.dim() != (batch.len(), spec.num_classes()) {
        return Err(Error::dim(
            "batch labels",
            format!("({}, {})", batch.len(), spec.num_classes()),
            format!("{:?}", labels.dim()),
        ));
    }
    let trace = forward_trace(spec, params, &batch.features);
    let loss = cross_entropy(&trace.probs, labels)?;
    let delta = &trace.probs - labels;
    Ok((backprop(spec, params, &trace, delta), loss))
}

/// Gradient and value of `Σ_j ‖φ(x̄_j) − target_j‖²` over the reference rows.
pub fn backward_reference(
    spec: &ModelSpec,
    params: &ModelParams,
    ref_features: &Array2<f64>,
    target_mean: &Array2<f64>,
) -> Result<(Gradients, f64)> {
    check_inputs(spec, params, ref_features)?;
    if target_mean.dim() != (ref_features.nrows(), spec.num_classes()) {
        return Err(Error::dim(
            "reference target",
            format!("({}, {})", ref_features.nrows(), spec.num_classes()),
            format!("{:?}", target_mean.dim()),
        ));
    }
    for row in target_mean.rows() {
        if (row.sum() - 1.0).abs() > 1e-6 {
            return Err(Error::Contract("reference target rows must sum to 1".into()));
        }
    }
    let trace = forward_trace(spec, params, ref_features);
    let diff = &trace.probs - target_mean;
    let loss = diff.iter().map(|d| d * d).sum();
    // dL/dp = 2·diff, pulled back through the softmax Jacobian diag(p) − p pᵀ.
    let mut delta = diff * 2.0;
    for (mut g, p) in delta.rows_mut().into_iter().zip(trace.probs.rows()) {
        let dot: f64 = g.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
        Zip::from(&mut g).and(&p).for_each(|g, &p| *g = p * (*g - dot));
    }
    Ok((backprop(spec, params, &trace, delta), loss))
}

#[allow(clippy::too_many_arguments)]
fn update(
    spec: &ModelSpec,
    params: &ModelParams,
    local: &Batch,
    reference: Option<(&Array2<f64>, &Array2<f64>)>,
    rho: f64,
    eta: f64,
    local_size: usize,
    ref_size: usize,
) -> Result<ModelParams> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("rho must lie in [0, 1], got {rho}")));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {eta}")));
    }
    if local_size == 0 || ref_size == 0 {
        return Err(Error::Contract("local and reference sizes must be positive".into()));
    }
    let mut next = params.clone();
    if rho < 1.0 {
        let (g, _) = backward_local(spec, params, local)?;
        next.add_scaled(-((1.0 - rho) * eta / local_size as f64), &g);
    }
    if let Some((features, target)) = reference {
        if rho > 0.0 {
            // ∇L_ref already carries the factor 2 of the squared norm.
            let (g, _) = backward_reference(spec, params, features, target)?;
            next.add_scaled(-(eta * rho / ref_size as f64), &g);
        }
    }
    Ok(next)
}

/// The combined distillation update:
///
/// ```text
/// Θ ← Θ − (1−ρ)η/M · Σ_local ∇ℓ − 2ηρ/R · Σ_ref (∇φ)ᵀ (φ − neighbor_mean)
/// ```
///
/// `local_size` is the `M` normalizer (the batch size for mini-batch steps)
/// and `ref_size` is `R`.
#[allow(clippy::too_many_arguments)]
pub fn sqmd_update(
    spec: &ModelSpec,
    params: &ModelParams,
    local_batch: &Batch,
    ref_features: &Array2<f64>,
    neighbor_mean: &Array2<f64>,
    rho: f64,
    eta: f64,
    local_size: usize,
    ref_size: usize,
) -> Result<ModelParams> {
    if neighbor_mean.dim() != (ref_features.nrows(), spec.num_classes()) {
        return Err(Error::dim(
            "neighbor mean",
            format!("({}, {})", ref_features.nrows(), spec.num_classes()),
            format!("{:?}", neighbor_mean.dim()),
        ));
    }
    update(
        spec,
        params,
        local_batch,
        Some((ref_features, neighbor_mean)),
        rho,
        eta,
        local_size,
        ref_size,
    )
}

/// Plain gradient descent on the mean local cross-entropy. Bit-identical to
/// [`sqmd_update`] with `rho = 0`.
pub fn local_step(
    spec: &ModelSpec,
    params: &ModelParams,
    local_batch: &Batch,
    eta: f64,
    local_size: usize,
) -> Result<ModelParams> {
    update(spec, params, local_batch, None, 0.0, eta, local_size, 1)
}
