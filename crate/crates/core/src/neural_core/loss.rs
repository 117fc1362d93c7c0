//! Per-frame softmax cross-entropy, averaged over frames.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Mean negative log-softmax of the labeled class per frame. Returns the
/// loss and its gradient with respect to the logits:
/// (softmax - one_hot) / frames.
pub fn softmax_ce(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (t, classes) = (logits.nrows(), logits.ncols());
    if labels.len() != t {
        return Err(Error::InvalidInput(format!(
            "{} labels for {t} logit frames",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidInput(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut grad = Array2::zeros((t, classes));
    let mut loss = 0.0;
    let scale = 1.0 / t as f64;
    for ti in 0..t {
        let row = logits.row(ti);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row.iter() {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln() + max;
        loss += (log_denom - row[labels[ti]]) * scale;
        for c in 0..classes {
            let p = (row[c] - max).exp() / denom;
            grad[(ti, c)] = (p - if c == labels[ti] { 1.0 } else { 0.0 }) * scale;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite cross-entropy loss".into()));
    }
    Ok((loss, grad))
}
