use serde::{Deserialize, Serialize};

use super::forward::{ForwardCache, NormMode};
use super::layers::{Layer, LayerStack};
use super::ops::entropy_objective_logit_grad;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnGrad<T> {
    pub d_gamma: Vec<T>,
    pub d_beta: Vec<T>,
}

/// Gradients of the batch-norm affine parameters, one entry per BN layer in
/// stack order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSet<T> {
    pub layers: Vec<BnGrad<T>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn zeros_like(stack: &LayerStack<T>) -> Self {
        Self {
            layers: stack
                .batch_norms()
                .map(|bn| BnGrad { d_gamma: vec![T::zero(); bn.dim()], d_beta: vec![T::zero(); bn.dim()] })
                .collect(),
        }
    }

    pub fn iter_values(&self) -> impl Iterator<Item = T> + '_ {
        self.layers.iter().flat_map(|g| g.d_gamma.iter().chain(&g.d_beta).copied())
    }

    pub fn is_zero(&self) -> bool {
        self.iter_values().all(|v| v == T::zero())
    }

    pub fn is_finite(&self) -> bool {
        self.iter_values().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad<T> {
    pub d_weights: Matrix<T>,
    pub d_bias: Vec<T>,
}

/// Gradients for every trainable parameter; used by source training only.
#[derive(Debug, Clone, PartialEq)]
pub struct FullGradients<T> {
    /// One entry per Dense layer in stack order.
    pub dense: Vec<DenseGrad<T>>,
    pub bn: GradientSet<T>,
}

/// Exact gradient of `(1/B) Σ_i coeff_i · H(softmax(f(x_i)))` with respect to
/// every BN gamma/beta, given the cache of a batch-stats forward.
pub fn backward_entropy_objective<T: Scalar>(
    stack: &LayerStack<T>,
    cache: &ForwardCache<T>,
    coeffs: &[T],
) -> Result<GradientSet<T>> {
    if cache.mode() != NormMode::BatchStats {
        return Err(Error::Contract("entropy objective needs a batch-stats forward cache".into()));
    }
    if coeffs.len() != cache.batch_size() {
        return Err(Error::Contract(format!(
            "{} coefficients for a batch of {}",
            coeffs.len(),
            cache.batch_size()
        )));
    }
    if coeffs.iter().all(|&c| c == T::zero()) {
        return Ok(GradientSet::zeros_like(stack));
    }
    let d_logits = entropy_objective_logit_grad(cache.logits(), coeffs);
    let (_, bn) = backward_from_logits(stack, cache, d_logits, false)?;
    Ok(bn)
}

/// Reverse pass from `d_logits`. With `full = false`, Dense gradients are
/// skipped and propagation stops at the lowest batch-norm layer.
pub fn backward_from_logits<T: Scalar>(
    stack: &LayerStack<T>,
    cache: &ForwardCache<T>,
    d_logits: Matrix<T>,
    full: bool,
) -> Result<(Vec<DenseGrad<T>>, GradientSet<T>)> {
    check_cache(stack, cache)?;
    if d_logits.shape() != (cache.batch_size(), stack.num_classes()) {
        return Err(Error::Contract("logit gradient shape mismatch".into()));
    }
    let first_bn = stack
        .layers()
        .iter()
        .position(|l| matches!(l, Layer::BatchNorm(_)))
        .unwrap_or(0);
    let stop = if full { 0 } else { first_bn };

    let mut dense = Vec::new();
    let mut bn_grads = Vec::new();
    let mut upstream = d_logits;
    for i in (stop..stack.layers().len()).rev() {
        let input = cache.layer_input(i);
        let need_dx = i > stop;
        match &stack.layers()[i] {
            Layer::Dense(d) => {
                if full {
                    let d_weights = input.transpose().matmul(&upstream)?;
                    let mut d_bias = vec![T::zero(); d.output_dim()];
                    for r in upstream.iter_rows() {
                        for (db, &g) in d_bias.iter_mut().zip(r) {
                            *db += g;
                        }
                    }
                    dense.push(DenseGrad { d_weights, d_bias });
                }
                if need_dx {
                    upstream = upstream.matmul_transposed(&d.weights)?;
                }
            }
            Layer::Activation { activation } => {
                for (g, &v) in upstream.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    *g *= activation.derivative(v);
                }
            }
            Layer::BatchNorm(bn) => {
                let c = cache
                    .bn(i)
                    .ok_or_else(|| Error::Contract(format!("no batch-norm cache for layer {i}")))?;
                let (rows, cols) = upstream.shape();
                let mut d_gamma = vec![T::zero(); cols];
                let mut d_beta = vec![T::zero(); cols];
                for r in 0..rows {
                    let g = upstream.row(r);
                    let xh = c.normalized.row(r);
                    for j in 0..cols {
                        d_gamma[j] += g[j] * xh[j];
                        d_beta[j] += g[j];
                    }
                }
                if need_dx {
                    match cache.mode() {
                        NormMode::BatchStats => {
                            // dx = (γ·inv_std / B)·(B·dy − Σdy − x̂·Σ(dy·x̂))
                            let n = T::from_usize_lossy(rows);
                            for r in 0..rows {
                                let xh = c.normalized.row(r);
                                let g = upstream.row_mut(r);
                                for j in 0..cols {
                                    g[j] = bn.gamma[j] * c.inv_std[j] / n
                                        * (n * g[j] - d_beta[j] - xh[j] * d_gamma[j]);
                                }
                            }
                        }
                        NormMode::RunningStats => {
                            for r in 0..rows {
                                let g = upstream.row_mut(r);
                                for j in 0..cols {
                                    g[j] *= bn.gamma[j] * c.inv_std[j];
                                }
                            }
                        }
                    }
                }
                bn_grads.push(BnGrad { d_gamma, d_beta });
            }
        }
    }
    dense.reverse();
    bn_grads.reverse();
    let bn = GradientSet { layers: bn_grads };
    if !bn.is_finite() {
        return Err(Error::NonFinite { layer: stop, kind: "gradient" });
    }
    Ok((dense, bn))
}

fn check_cache<T: Scalar>(stack: &LayerStack<T>, cache: &ForwardCache<T>) -> Result<()> {
    let layers = stack.layers();
    if cache.inputs.len() != layers.len() {
        return Err(Error::Contract("cache was produced by a different stack".into()));
    }
    for (i, layer) in layers.iter().enumerate() {
        let input = cache.layer_input(i);
        let ok = match layer {
            Layer::Dense(d) => input.cols() == d.input_dim(),
            Layer::BatchNorm(bn) => {
                cache.bn(i).is_some_and(|c| c.inv_std.len() == bn.dim()) && input.cols() == bn.dim()
            }
            Layer::Activation { .. } => true,
        };
        if !ok {
            return Err(Error::Contract(format!("cache does not match layer {i}")));
        }
    }
    Ok(())
}
