use super::Tensor;
use crate::error::{Error, Result};

/// Row-wise softmax of `[batch, k]` logits with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(out)
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Ok(out)
}

/// A scalar loss and its gradient with respect to the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Tensor,
}

/// Mean squared error over all elements.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<LossOutput> {
    pred.expect_same_shape(target)?;
    let n = pred.len() as f64;
    let diff = pred.zip_map(target, |p, t| p - t)?;
    Ok(LossOutput {
        loss: diff.data().iter().map(|d| d * d).sum::<f64>() / n,
        grad: diff.map(|d| 2.0 * d / n),
    })
}

/// Mean Huber loss: quadratic within `delta`, linear outside.
pub fn huber(pred: &Tensor, target: &Tensor, delta: f64) -> Result<LossOutput> {
    pred.expect_same_shape(target)?;
    let n = pred.len() as f64;
    let diff = pred.zip_map(target, |p, t| p - t)?;
    let loss = diff
        .data()
        .iter()
        .map(|&e| {
            if e.abs() <= delta {
                0.5 * e * e
            } else {
                delta * (e.abs() - 0.5 * delta)
            }
        })
        .sum::<f64>()
        / n;
    Ok(LossOutput {
        loss,
        grad: diff.map(|e| e.clamp(-delta, delta) / n),
    })
}

/// Mean negative log-likelihood of `classes` under softmax(`logits`).
pub fn cross_entropy(logits: &Tensor, classes: &[usize]) -> Result<LossOutput> {
    let (batch, k) = logits.dims2()?;
    if classes.len() != batch {
        return Err(Error::Shape(format!(
            "{} class labels for a batch of {batch}",
            classes.len()
        )));
    }
    if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
        return Err(Error::InvalidInput(format!(
            "class index {bad} out of range for {k} classes"
        )));
    }
    let logp = log_softmax(logits)?;
    let mut grad = softmax(logits)?;
    let mut loss = 0.0;
    for (i, &c) in classes.iter().enumerate() {
        loss -= logp.data()[i * k + c];
        grad.data_mut()[i * k + c] -= 1.0;
    }
    let b = batch as f64;
    grad.data_mut().iter_mut().for_each(|g| *g /= b);
    Ok(LossOutput {
        loss: loss / b,
        grad,
    })
}
