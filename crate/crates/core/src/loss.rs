use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax of `logits / temperature`, max-subtracted.
pub fn softmax_rows(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    let (n, _) = logits.dims2()?;
    let mut out = logits.clone();
    for i in 0..n {
        softmax_in_place(out.item_mut(i), temperature);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Mean cross-entropy against hard labels and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = logits.dims2()?;
    if n != labels.len() {
        return Err(Error::shape(format!("{n} rows but {} labels", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Label { label, num_classes: c });
    }
    let mut grad = softmax_rows(logits, 1.0)?;
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = grad.item_mut(i);
        loss -= row[y].max(f64::MIN_POSITIVE).ln();
        row[y] -= 1.0;
        row.iter_mut().for_each(|g| *g /= n as f64);
    }
    Ok((loss / n as f64, grad))
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
