//! Classification loss heads.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Loss selector; training always uses softmax cross-entropy, the squared
/// error head exists for gradient checking (central differences are exact on
/// quadratics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SoftmaxCrossEntropy,
    SquaredError,
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    if logits.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "loss expects (n, classes) logits, got {:?}",
            logits.shape()
        )));
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{n} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {bad} out of range (classes={c})")));
    }
    Ok((n, c))
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = check_labels(logits, labels)?;
    let mut grad = Tensor::zeros(logits.shape());
    let ld = logits.data();
    let gd = grad.data_mut();
    let mut total = 0.0;
    for i in 0..n {
        let row = &ld[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let log_z = max + sum.ln();
        total += log_z - row[labels[i]];
        let grow = &mut gd[i * c..(i + 1) * c];
        for (j, gv) in grow.iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            *gv = (p - if j == labels[i] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

/// Mean squared error against one-hot targets: L = sum((y - e)^2) / (2n).
pub fn squared_error(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = check_labels(logits, labels)?;
    let mut grad = Tensor::zeros(logits.shape());
    let ld = logits.data();
    let gd = grad.data_mut();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..c {
            let target = if j == labels[i] { 1.0 } else { 0.0 };
            let d = ld[i * c + j] - target;
            total += d * d;
            gd[i * c + j] = d / n as f64;
        }
    }
    Ok((total / (2.0 * n as f64), grad))
}

pub fn evaluate(kind: LossKind, logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    match kind {
        LossKind::SoftmaxCrossEntropy => softmax_cross_entropy(logits, labels),
        LossKind::SquaredError => squared_error(logits, labels),
    }
}

/// Argmax class per row; earliest index wins ties.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let preds = predictions(logits);
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_c_exactly() {
        // Batch of 4 (power of two so the mean is exact), 4 classes.
        let logits = Tensor::zeros(&[4, 4]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 1, 2, 3]).unwrap();
        assert_eq!(loss, (4.0f64).ln());
    }

    #[test]
    fn ce_gradient_sums_to_zero_and_points_away_from_label() {
        let logits = Tensor::new(vec![1, 3], vec![1.0, 2.0, 0.5]).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, &[1]).unwrap();
        let sum: f64 = g.data().iter().sum();
        assert!(sum.abs() < 1e-12);
        assert!(g.data()[1] < 0.0);
        assert!(g.data()[0] > 0.0 && g.data()[2] > 0.0);
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let logits = Tensor::new(vec![2, 2], vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        assert_eq!(accuracy(&logits, &[0, 1]), 1.0);
        assert_eq!(accuracy(&logits, &[1, 1]), 0.5);
    }
}
