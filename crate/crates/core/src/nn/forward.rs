use serde::{Deserialize, Serialize};

use super::layers::{Layer, LayerStack};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Which statistics a batch-norm layer normalizes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Mean and biased variance of the current batch. Needs at least two rows.
    BatchStats,
    /// Stored running statistics; rows are processed independently.
    RunningStats,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub normalized: Matrix<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Biased batch variance. Zero-filled in running-stats mode.
    pub batch_var: Vec<T>,
}

/// Everything `backward` needs: each layer's input plus normalization internals.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub(crate) mode: NormMode,
    pub(crate) inputs: Vec<Matrix<T>>,
    pub(crate) bn: Vec<Option<BnCache<T>>>,
    pub(crate) logits: Matrix<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }

    pub fn logits(&self) -> &Matrix<T> {
        &self.logits
    }

    /// Input fed to layer `i`.
    pub fn layer_input(&self, i: usize) -> &Matrix<T> {
        &self.inputs[i]
    }

    /// Batch-norm internals for layer `i`, if it is a batch-norm layer.
    pub fn bn(&self, i: usize) -> Option<&BnCache<T>> {
        self.bn.get(i).and_then(Option::as_ref)
    }
}

pub fn forward<T: Scalar>(
    stack: &LayerStack<T>,
    x: &Matrix<T>,
    mode: NormMode,
) -> Result<(Matrix<T>, ForwardCache<T>)> {
    if x.cols() != stack.input_dim() {
        return Err(Error::Config(format!(
            "input has {} features, network expects {}",
            x.cols(),
            stack.input_dim()
        )));
    }
    if mode == NormMode::BatchStats && x.rows() < 2 {
        return Err(Error::Config("batch statistics need at least two samples".into()));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite { layer: 0, kind: "input" });
    }
    let n = stack.layers().len();
    let mut inputs = Vec::with_capacity(n);
    let mut bn_caches = Vec::with_capacity(n);
    let mut cur = x.clone();
    for (i, layer) in stack.layers().iter().enumerate() {
        let (out, bn_cache, kind) = match layer {
            Layer::Dense(d) => {
                let mut out = cur.matmul(&d.weights)?;
                for r in 0..out.rows() {
                    for (o, &b) in out.row_mut(r).iter_mut().zip(&d.bias) {
                        *o += b;
                    }
                }
                (out, None, "dense")
            }
            Layer::BatchNorm(bn) => {
                let (out, cache) = batch_norm_forward(bn, &cur, mode);
                (out, Some(cache), "batch_norm")
            }
            Layer::Activation { activation } => (cur.map(|v| activation.apply(v)), None, "activation"),
        };
        if !out.is_finite() {
            return Err(Error::NonFinite { layer: i, kind });
        }
        inputs.push(cur);
        bn_caches.push(bn_cache);
        cur = out;
    }
    let cache = ForwardCache { mode, inputs, bn: bn_caches, logits: cur.clone() };
    Ok((cur, cache))
}

/// Logits only.
pub fn logits<T: Scalar>(stack: &LayerStack<T>, x: &Matrix<T>, mode: NormMode) -> Result<Matrix<T>> {
    forward(stack, x, mode).map(|(z, _)| z)
}

fn batch_norm_forward<T: Scalar>(
    bn: &super::layers::BatchNorm<T>,
    x: &Matrix<T>,
    mode: NormMode,
) -> (Matrix<T>, BnCache<T>) {
    let (rows, cols) = x.shape();
    let (mean, var) = match mode {
        NormMode::BatchStats => {
            let inv_n = T::one() / T::from_usize_lossy(rows);
            let mut mean = vec![T::zero(); cols];
            for row in x.iter_rows() {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_n);
            let mut var = vec![T::zero(); cols];
            for row in x.iter_rows() {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let c = v - m;
                    *s += c * c;
                }
            }
            var.iter_mut().for_each(|s| *s *= inv_n);
            (mean, var)
        }
        NormMode::RunningStats => (bn.running_mean.clone(), bn.running_var.clone()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + bn.eps).sqrt()).collect();
    let mut normalized = Matrix::zeros(rows, cols);
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let xr = x.row(r);
        let nr = normalized.row_mut(r);
        for j in 0..cols {
            nr[j] = (xr[j] - mean[j]) * inv_std[j];
        }
        let nr = normalized.row(r);
        let or = out.row_mut(r);
        for j in 0..cols {
            or[j] = bn.gamma[j] * nr[j] + bn.beta[j];
        }
    }
    let batch_var = match mode {
        NormMode::BatchStats => var,
        NormMode::RunningStats => vec![T::zero(); cols],
    };
    (out, BnCache { normalized, inv_std, batch_mean: mean, batch_var })
}

/// Exponential update of BN running statistics from a batch-stats forward.
/// The running variance absorbs the unbiased batch variance.
pub fn update_running_stats<T: Scalar>(
    stack: &mut LayerStack<T>,
    cache: &ForwardCache<T>,
    momentum: T,
) -> Result<()> {
    if cache.mode != NormMode::BatchStats {
        return Err(Error::Contract("running stats need a batch-stats forward".into()));
    }
    let b = cache.batch_size();
    let unbias = T::from_usize_lossy(b) / T::from_usize_lossy(b - 1);
    for (layer, c) in stack.layers_mut().iter_mut().zip(&cache.bn) {
        if let (Layer::BatchNorm(bn), Some(c)) = (layer, c) {
            for j in 0..bn.dim() {
                bn.running_mean[j] =
                    (T::one() - momentum) * bn.running_mean[j] + momentum * c.batch_mean[j];
                bn.running_var[j] =
                    (T::one() - momentum) * bn.running_var[j] + momentum * c.batch_var[j] * unbias;
            }
        }
    }
    Ok(())
}
