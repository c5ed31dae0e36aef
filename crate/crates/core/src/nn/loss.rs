use alloc::format;
use alloc::vec::Vec;

use super::resnet::softmax2;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// `-ln softmax(logits)[label]`, evaluated in log-sum-exp form.
pub fn cross_entropy_loss(logits: [f64; 2], label: u8) -> Result<f64> {
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logits {:?}", logits)));
    }
    if label > 1 {
        return Err(Error::Parameter(format!("label must be 0 or 1, got {}", label)));
    }
    let m = logits[0].max(logits[1]);
    let lse = m + libm::log(libm::exp(logits[0] - m) + libm::exp(logits[1] - m));
    Ok((lse - logits[label as usize]).max(0.0))
}

/// d loss / d logits = softmax(logits) − onehot(label).
pub fn cross_entropy_grad(logits: [f64; 2], label: u8) -> [f64; 2] {
    let mut p = softmax2(logits);
    p[label as usize] -= 1.0;
    p
}

/// Mean loss over a `[N, 2]` batch and its gradient with respect to the
/// logits.
pub fn cross_entropy_batch<T: Real>(logits: &Tensor<T>, labels: &[u8]) -> Result<(f64, Tensor<T>)> {
    let n = labels.len();
    if logits.shape() != [n, 2] {
        return Err(Error::Geometry(format!(
            "expected [{}, 2] logits, got {:?}",
            n,
            logits.shape()
        )));
    }
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(2 * n);
    for (row, &label) in logits.data().chunks(2).zip(labels) {
        let l = [row[0].as_f64(), row[1].as_f64()];
        total += cross_entropy_loss(l, label)?;
        let g = cross_entropy_grad(l, label);
        grad.push(T::of(g[0] / n as f64));
        grad.push(T::of(g[1] / n as f64));
    }
    Ok((total / n as f64, Tensor::from_vec(&[n, 2], grad)?))
}
