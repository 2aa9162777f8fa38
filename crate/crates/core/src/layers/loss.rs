use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total = crate::tensor::pairwise_sum(&exps);
    exps.into_iter().map(|e| e / total).collect()
}

/// `(-log softmax(logits)[label], softmax(logits) - onehot(label))`
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, label: usize) -> Result<(T, Tensor<T>)> {
    let z = logits.data();
    if label >= z.len() {
        return Err(Error::arg(format!(
            "label {label} out of range for {} classes",
            z.len()
        )));
    }
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let log_norm = crate::tensor::pairwise_sum(&z.iter().map(|&v| (v - max).exp()).collect::<Vec<_>>()).ln();
    let loss = log_norm - (z[label] - max);
    let mut grad = softmax(z);
    grad[label] -= T::one();
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}
