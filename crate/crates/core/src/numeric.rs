//! Small numerical kernels shared by the analysis modules.

use ndarray::{Array1, ArrayView1};

/// Subtract the mean from every entry.
pub fn center(v: ArrayView1<f64>) -> Array1<f64> {
    let mean = v.sum() / v.len() as f64;
    v.mapv(|x| x - mean)
}

/// `√d · (v − mean(v)) / ‖v − mean(v)‖`, the gain-free LayerNorm.
///
/// A zero vector maps to zero.
pub fn layer_norm(v: ArrayView1<f64>) -> Array1<f64> {
    let c = center(v);
    let norm = c.dot(&c).sqrt();
    if norm == 0.0 {
        return c;
    }
    let scale = (v.len() as f64).sqrt() / norm;
    c.mapv(|x| x * scale)
}

/// `√d · v / ‖v‖` for a vector that is already centered.
pub fn scale_to_sqrt_d(v: ArrayView1<f64>) -> Array1<f64> {
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 {
        return v.to_owned();
    }
    let scale = (v.len() as f64).sqrt() / norm;
    v.mapv(|x| x * scale)
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Numerically stable softmax (max score subtracted before exponentiation).
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

pub fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let lse = logsumexp(scores);
    scores.iter().map(|s| s - lse).collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}
