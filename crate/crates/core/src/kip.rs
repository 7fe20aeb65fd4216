//! Confidence-weighted aggregation of source, adapting and EMA logits.
//!
//! Model `i` gets weight `c_i = 1/3 + γ·(m_i − mean_j m_j)` where `m_i` is its
//! maximum class probability; the blended logit is `Σ_i c_i·z_i`. Weights are
//! not clamped, so a large `γ` can drive one of them negative.

use crate::error::{config_err, Result};
use crate::nn::{logits, softmax_entropy, LayerStack, NormMode};
use crate::scalar::{log_sum_exp, Scalar};
use crate::tensor::{argmax, Matrix};

/// Per-sample KIP results. `weights[i]` is ordered (source, adapting, ema).
#[derive(Debug, Clone, PartialEq)]
pub struct KipOutput<T> {
    pub weights: Vec<[T; 3]>,
    pub logits: Matrix<T>,
    pub labels: Vec<usize>,
}

pub fn kip_weights<T: Scalar>(max_probs: [T; 3], gamma: T) -> [T; 3] {
    let third = T::one() / T::lit(3.0);
    let mean = (max_probs[0] + max_probs[1] + max_probs[2]) * third;
    max_probs.map(|m| third + gamma * (m - mean))
}

fn max_prob_rows<T: Scalar>(z: &Matrix<T>) -> Vec<T> {
    let (p, _) = softmax_entropy(z);
    p.iter_rows()
        .map(|r| r.iter().copied().fold(T::neg_infinity(), T::max))
        .collect()
}

/// Blends three logit matrices of identical shape.
pub fn combine<T: Scalar>(
    source: &Matrix<T>,
    adapting: &Matrix<T>,
    ema: &Matrix<T>,
    gamma: T,
) -> Result<KipOutput<T>> {
    if !(gamma >= T::zero()) {
        return config_err(format!("gamma must be non-negative, got {gamma}"));
    }
    if source.shape() != adapting.shape() || source.shape() != ema.shape() {
        return config_err("logit matrices disagree in shape");
    }
    let (ms, ma, me) = (max_prob_rows(source), max_prob_rows(adapting), max_prob_rows(ema));
    let mut out = Matrix::zeros(source.rows(), source.cols());
    let mut weights = Vec::with_capacity(source.rows());
    let mut labels = Vec::with_capacity(source.rows());
    for i in 0..source.rows() {
        let c = kip_weights([ms[i], ma[i], me[i]], gamma);
        let row = out.row_mut(i);
        for (k, o) in row.iter_mut().enumerate() {
            *o = c[0] * source[(i, k)] + c[1] * adapting[(i, k)] + c[2] * ema[(i, k)];
        }
        labels.push(argmax(row));
        weights.push(c);
    }
    Ok(KipOutput { weights, logits: out, labels })
}

/// Source sees the raw input with running statistics; adapting and EMA see
/// `x_view` (normally the step's augmented batch) with batch statistics.
pub fn kip_predict<T: Scalar>(
    source: &LayerStack<T>,
    adapting: &LayerStack<T>,
    ema: &LayerStack<T>,
    x_raw: &Matrix<T>,
    x_view: &Matrix<T>,
    gamma: T,
) -> Result<KipOutput<T>> {
    let zs = logits(source, x_raw, NormMode::RunningStats)?;
    let za = logits(adapting, x_view, NormMode::BatchStats)?;
    let ze = logits(ema, x_view, NormMode::BatchStats)?;
    combine(&zs, &za, &ze, gamma)
}

/// `−ln Σ_k exp(z_k)` per row; larger means more open-set-like.
pub fn energy_score<T: Scalar>(logits: &Matrix<T>) -> Vec<T> {
    logits.iter_rows().map(|z| -log_sum_exp(z)).collect()
}

/// Energy score of the adapting model on the raw batch (batch statistics).
pub fn open_set_scores_for_eval<T: Scalar>(adapting: &LayerStack<T>, x_raw: &Matrix<T>) -> Result<Vec<T>> {
    Ok(energy_score(&logits(adapting, x_raw, NormMode::BatchStats)?))
}
