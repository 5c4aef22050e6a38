//! Classification likelihood.

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Row-wise softmax, stabilized by the row maximum.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// `log Σ_j exp(row_j)` for one row.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if logits.rows() == 0 {
        return Err(Error::EmptyBatch("softmax_xent"));
    }
    if logits.cols() < 2 {
        return Err(Error::InvalidArgument(format!(
            "softmax cross-entropy needs at least 2 classes, got {}",
            logits.cols()
        )));
    }
    if labels.len() != logits.rows() {
        return Err(Error::Dimension {
            op: "softmax_xent labels",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::InvalidLabel {
            label: bad,
            classes: logits.cols(),
        });
    }
    Ok(())
}

/// Mean negative log-likelihood `-mean log softmax(logits)[label]` and its
/// gradient `(softmax - onehot) / batch`.
pub fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    check_labels(logits, labels)?;
    let n = logits.rows() as f64;
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        loss += log_sum_exp(logits.row(r)) - logits.get(r, y);
        let row = grad.row_mut(r);
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    Ok((loss / n, grad))
}

/// Per-example log-likelihoods `log softmax(logits)[label]`.
pub fn log_likelihoods(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(r, &y)| logits.get(r, y) - log_sum_exp(logits.row(r)))
        .collect())
}
