//! Softmax, cross-entropy, and their derivatives.

use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Clamped natural log used by every loss and divergence in the crate.
#[inline]
pub fn floored_ln(p: f64) -> f64 {
    math::ln(p.max(LOG_FLOOR))
}

fn softmax_row(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = math::exp((z - max) / temperature);
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Row-wise `softmax(logits / temperature)` over the last axis of a
/// `[batch, classes]` tensor (a rank-1 tensor is treated as one row).
pub fn softmax_t(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(invalid!("temperature must be positive, got {temperature}"));
    }
    let width = *logits.shape().last().ok_or(Error::Empty("softmax"))?;
    let mut out = Tensor::zeros(logits.shape());
    for (src, dst) in logits
        .data()
        .chunks(width)
        .zip(out.data_mut().chunks_mut(width))
    {
        softmax_row(src, temperature, dst);
    }
    Ok(out)
}

/// Vector-Jacobian product of the softmax at temperature `temperature`:
/// maps a gradient with respect to `probs` to one with respect to the logits.
pub fn softmax_backward(probs: &Tensor, grad_probs: &Tensor, temperature: f64) -> Result<Tensor> {
    probs.check_same_shape(grad_probs, "softmax backward")?;
    let width = *probs.shape().last().ok_or(Error::Empty("softmax"))?;
    let mut out = Tensor::zeros(probs.shape());
    for ((p, g), o) in probs
        .data()
        .chunks(width)
        .zip(grad_probs.data().chunks(width))
        .zip(out.data_mut().chunks_mut(width))
    {
        let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for k in 0..width {
            o[k] = p[k] * (g[k] - inner) / temperature;
        }
    }
    Ok(out)
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(invalid!(
            "{} labels for a batch of {batch}",
            labels.len()
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(invalid!("label {bad} out of range for {classes} classes"));
    }
    Ok(())
}

fn smoothed_target(label: usize, classes: usize, smoothing: f64, k: usize) -> f64 {
    let hot = if k == label { 1.0 } else { 0.0 };
    (1.0 - smoothing) * hot + smoothing / classes as f64
}

/// Per-sample cross-entropy of `probs` (`[batch, classes]`) against the
/// smoothed one-hot targets.
pub fn cross_entropy_per_sample(
    probs: &Tensor,
    labels: &[usize],
    smoothing: f64,
) -> Result<Vec<f64>> {
    if probs.rank() != 2 {
        return Err(invalid!("cross-entropy expects [batch, classes] probabilities"));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(invalid!("label smoothing must lie in [0, 1), got {smoothing}"));
    }
    let (batch, classes) = (probs.shape()[0], probs.shape()[1]);
    check_labels(labels, batch, classes)?;
    Ok((0..batch)
        .map(|i| {
            let row = probs.item_slice(i);
            -(0..classes)
                .map(|k| {
                    let t = smoothed_target(labels[i], classes, smoothing, k);
                    if t == 0.0 {
                        0.0
                    } else {
                        t * floored_ln(row[k])
                    }
                })
                .sum::<f64>()
        })
        .collect())
}

/// Mean cross-entropy over the batch. Probabilities below [`LOG_FLOOR`] are
/// clamped before the logarithm.
pub fn cross_entropy(probs: &Tensor, labels: &[usize], smoothing: f64) -> Result<f64> {
    let per = cross_entropy_per_sample(probs, labels, smoothing)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Gradient of `scale * sum_i CE_i` with respect to the logits, using the
/// fused softmax/cross-entropy form `p - t`.
pub fn cross_entropy_logit_grad(
    probs: &Tensor,
    labels: &[usize],
    smoothing: f64,
    scale: f64,
) -> Result<Tensor> {
    let (batch, classes) = (probs.shape()[0], probs.shape()[1]);
    check_labels(labels, batch, classes)?;
    let mut g = Tensor::zeros(probs.shape());
    for i in 0..batch {
        let p = probs.item_slice(i);
        let row = g.item_slice_mut(i);
        for k in 0..classes {
            row[k] = scale * (p[k] - smoothed_target(labels[i], classes, smoothing, k));
        }
    }
    Ok(g)
}
