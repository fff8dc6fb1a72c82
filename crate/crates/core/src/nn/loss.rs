//! Scalar losses returning `(value, dLoss/dPrediction)`.

use super::matrix::Matrix;
use crate::error::{Error, Result};

fn same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: prediction {:?} vs target {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean over all entries of `(pred - target)^2`.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    same_shape(pred, target, "mse")?;
    let denom = pred.cols() as f64 * pred.rows() as f64;
    if denom == 0.0 {
        return Err(Error::Shape("mse over an empty batch".into()));
    }
    let scale = 2.0 / denom;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut total = 0.0;
    for ((g, &p), &t) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(pred.as_slice())
        .zip(target.as_slice())
    {
        let diff = p - t;
        total += diff * diff;
        *g = scale * diff;
    }
    Ok((total / denom, grad))
}

/// Row-weighted squared error: `sum_i w_i * ||pred_i - target_i||^2 / (cols * sum_i w_i)`.
///
/// With unit weights the gradient is bitwise identical to [`mse_loss`].
pub fn weighted_mse_loss(pred: &Matrix, target: &Matrix, weights: &[f64]) -> Result<(f64, Matrix)> {
    same_shape(pred, target, "weighted mse")?;
    if weights.len() != pred.rows() {
        return Err(Error::Shape(format!(
            "{} weights for {} rows",
            weights.len(),
            pred.rows()
        )));
    }
    let weight_sum: f64 = weights.iter().sum();
    if !(weight_sum > 0.0) {
        return Err(Error::InvalidArgument(
            "weighted loss needs a positive total weight".into(),
        ));
    }
    let denom = pred.cols() as f64 * weight_sum;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut total = 0.0;
    for (r, &w) in weights.iter().enumerate() {
        let scale = 2.0 * w / denom;
        let mut row_sq = 0.0;
        for ((g, &p), &t) in grad
            .row_mut(r)
            .iter_mut()
            .zip(pred.row(r))
            .zip(target.row(r))
        {
            let diff = p - t;
            row_sq += diff * diff;
            *g = scale * diff;
        }
        total += w * row_sq;
    }
    Ok((total / denom, grad))
}

#[inline]
fn bce_term(z: f64, y: f64) -> f64 {
    // log(1 + exp(z)) - z*y, written so exp never overflows
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn check_labels(labels: &Matrix) -> Result<()> {
    match labels.as_slice().iter().find(|&&y| y != 0.0 && y != 1.0) {
        Some(y) => Err(Error::InvalidArgument(format!(
            "binary labels must be 0 or 1, got {y}"
        ))),
        None => Ok(()),
    }
}

/// Mean binary cross-entropy of sigmoid(`logits`) against `labels`.
pub fn bce_with_logits(logits: &Matrix, labels: &Matrix) -> Result<(f64, Matrix)> {
    same_shape(logits, labels, "bce")?;
    check_labels(labels)?;
    let n = logits.as_slice().len();
    if n == 0 {
        return Err(Error::Shape("bce over an empty batch".into()));
    }
    let n = n as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for ((g, &z), &y) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(logits.as_slice())
        .zip(labels.as_slice())
    {
        total += bce_term(z, y);
        *g = (super::sigmoid(z) - y) / n;
    }
    Ok((total / n, grad))
}

/// BCE against a single label for every entry.
pub fn bce_with_logits_const(logits: &Matrix, label: f64) -> Result<(f64, Matrix)> {
    bce_with_logits(logits, &Matrix::filled(logits.rows(), logits.cols(), label))
}

/// Row-weighted BCE summed and divided by `normalizer`. A zero normalizer
/// (every weight zero) yields a zero loss and a zero gradient.
pub fn weighted_bce_with_logits(
    logits: &Matrix,
    label: f64,
    weights: &[f64],
    normalizer: f64,
) -> Result<(f64, Matrix)> {
    if label != 0.0 && label != 1.0 {
        return Err(Error::InvalidArgument(format!(
            "binary labels must be 0 or 1, got {label}"
        )));
    }
    if logits.cols() != 1 || weights.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "weighted bce expects a column of logits with one weight per row, got {:?} and {} weights",
            logits.shape(),
            weights.len()
        )));
    }
    let mut grad = Matrix::zeros(logits.rows(), 1);
    if normalizer == 0.0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    for (r, &w) in weights.iter().enumerate() {
        let z = logits.get(r, 0);
        if w != 0.0 {
            total += w * bce_term(z, label);
        }
        grad.set(r, 0, w * (super::sigmoid(z) - label) / normalizer);
    }
    Ok((total / normalizer, grad))
}
