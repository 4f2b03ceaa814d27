use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax of a `(batch, classes)` tensor.
pub fn softmax(logits: &Tensor) -> Tensor {
    let c = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 {
        return Err(Error::input(format!(
            "logits must be (batch, classes), got {:?}",
            logits.shape()
        )));
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::input(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::input(format!("label {bad} out of range for {c} classes")));
    }
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits.data()[r * c..(r + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        grad.data_mut()[r * c + y] -= 1.0;
    }
    let scale = 1.0 / b as f64;
    for g in grad.data_mut() {
        *g *= scale;
    }
    Ok((loss * scale, grad))
}

/// Index of the largest logit per row (first on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
