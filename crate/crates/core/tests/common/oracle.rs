//! Straightforward scalar re-implementations used as test oracles. Nothing
//! here calls into the library's numeric code.

use sqmd_core::nn::{Activation, ModelParams, ModelSpec};

pub const EPS: f64 = 1e-12;

pub fn rows(m: &ndarray::Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

/// Forward pass of one sample with plain loops.
pub fn forward_row(spec: &ModelSpec, params: &ModelParams, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let last = params.layers.len() - 1;
    for (l, layer) in params.layers.iter().enumerate() {
        let (fan_in, fan_out) = layer.weights.dim();
        let mut z = vec![0.0; fan_out];
        for (j, zj) in z.iter_mut().enumerate() {
            let mut s = layer.bias[j];
            for i in 0..fan_in {
                s += a[i] * layer.weights[(i, j)];
            }
            *zj = s;
        }
        if l == last {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let total: f64 = e.iter().sum();
            a = e.iter().map(|v| v / total).collect();
        } else {
            a = z
                .iter()
                .map(|&v| match spec.activation {
                    Activation::Relu => v.max(0.0),
                    Activation::Tanh => v.tanh(),
                })
                .collect();
        }
    }
    a
}

pub fn forward(spec: &ModelSpec, params: &ModelParams, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter().map(|row| forward_row(spec, params, row)).collect()
}

/// `Σ_i −ln max(p[i][y_i], ε)`.
pub fn summed_ce(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    probs.iter().zip(labels).map(|(p, &y)| -(p[y].max(EPS).min(1.0)).ln()).sum()
}

/// Mean over rows of KL(a‖b) after clamping to ε and renormalizing.
pub fn divergence(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let fix = |r: &Vec<f64>| {
        let c: Vec<f64> = r.iter().map(|v| v.max(EPS)).collect();
        let s: f64 = c.iter().sum();
        c.into_iter().map(|v| v / s).collect::<Vec<f64>>()
    };
    let mut total = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        let (pa, pb) = (fix(ra), fix(rb));
        for c in 0..pa.len() {
            total += pa[c] * (pa[c].ln() - pb[c].ln());
        }
    }
    total / a.len() as f64
}

/// `Σ_j ‖φ_j − t_j‖²`.
pub fn reference_loss(probs: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
    probs
        .iter()
        .zip(target)
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum()
}

pub fn mean_rows(ms: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let (r, c) = (ms[0].len(), ms[0][0].len());
    let mut out = vec![vec![0.0; c]; r];
    for m in ms {
        for i in 0..r {
            for j in 0..c {
                out[i][j] += m[i][j];
            }
        }
    }
    for row in &mut out {
        for v in row.iter_mut() {
            *v /= ms.len() as f64;
        }
    }
    out
}

/// Central finite differences of `f` with respect to every parameter.
pub fn fd_gradient(params: &ModelParams, step: f64, f: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    let n = params.num_params();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut plus = params.clone();
        let mut minus = params.clone();
        *plus.values_mut().nth(i).unwrap() += step;
        *minus.values_mut().nth(i).unwrap() -= step;
        out.push((f(&plus) - f(&minus)) / (2.0 * step));
    }
    out
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}
