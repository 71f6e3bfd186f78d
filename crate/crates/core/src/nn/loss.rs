use super::{NnError, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits. The loss is computed in 64-bit.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(NnError::Shape(format!("logits {:?} vs {} labels", s, labels.len())));
    }
    let (b, k) = (s[0], s[1]);
    let mut loss = 0.0;
    let mut grad = vec![0.0; b * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(NnError::Shape(format!("label {y} out of range for {k} classes")));
        }
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[y];
        for j in 0..k {
            let prob = (row[j] - m).exp() / z;
            grad[i * k + j] = (prob - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, Tensor::new(&[b, k], grad, logits.precision())?))
}

/// Fraction of rows whose arg-max equals the label. Ties go to the lowest index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count();
    correct as f64 / labels.len().max(1) as f64
}
