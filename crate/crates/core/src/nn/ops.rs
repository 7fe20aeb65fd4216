//! Softmax, entropy and their logit gradients.

use crate::scalar::{log_sum_exp, Scalar};
use crate::tensor::Matrix;

/// Row-wise softmax probabilities and Shannon entropies (nats).
pub fn softmax_entropy<T: Scalar>(logits: &Matrix<T>) -> (Matrix<T>, Vec<T>) {
    let mut probs = Matrix::zeros(logits.rows(), logits.cols());
    let mut entropy = Vec::with_capacity(logits.rows());
    for (i, z) in logits.iter_rows().enumerate() {
        let lse = log_sum_exp(z);
        let p = probs.row_mut(i);
        let mut h = T::zero();
        for (pk, &zk) in p.iter_mut().zip(z) {
            let log_p = zk - lse;
            *pk = log_p.exp();
            h -= *pk * log_p;
        }
        // rounding can leave -0.0 or a hair above ln C
        let upper = T::from_usize_lossy(z.len()).ln();
        entropy.push(h.max(T::zero()).min(upper));
    }
    (probs, entropy)
}

/// Gradient w.r.t. logits of `(1/B) Σ_i coeff_i · H_i`.
///
/// `∂H/∂z_k = -p_k (ln p_k + H)`.
pub fn entropy_objective_logit_grad<T: Scalar>(logits: &Matrix<T>, coeffs: &[T]) -> Matrix<T> {
    let b = logits.rows();
    let inv_b = T::one() / T::from_usize_lossy(b);
    let mut grad = Matrix::zeros(b, logits.cols());
    for (i, z) in logits.iter_rows().enumerate() {
        let c = coeffs[i] * inv_b;
        if c == T::zero() {
            continue;
        }
        let lse = log_sum_exp(z);
        let log_p: Vec<T> = z.iter().map(|&zk| zk - lse).collect();
        let h = log_p.iter().fold(T::zero(), |acc, &lp| acc - lp.exp() * lp);
        for (g, &lp) in grad.row_mut(i).iter_mut().zip(&log_p) {
            *g = -c * lp.exp() * (lp + h);
        }
    }
    grad
}

/// Mean cross-entropy and its logit gradient.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> (T, Matrix<T>) {
    let b = logits.rows();
    let inv_b = T::one() / T::from_usize_lossy(b);
    let mut grad = Matrix::zeros(b, logits.cols());
    let mut loss = T::zero();
    for (i, z) in logits.iter_rows().enumerate() {
        let lse = log_sum_exp(z);
        loss += lse - z[labels[i]];
        for (k, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = (z[k] - lse).exp();
            let target = if k == labels[i] { T::one() } else { T::zero() };
            *g = (p - target) * inv_b;
        }
    }
    (loss * inv_b, grad)
}
