//! Optimizers. Test-time updates touch batch-norm gamma/beta only.

use serde::{Deserialize, Serialize};

use super::backward::GradientSet;
use super::layers::LayerStack;
use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const ADAM_DEFAULT: Self = OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::ADAM_DEFAULT
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Per-slice optimizer state over an ordered list of parameter slices.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: T,
    step: i32,
    moments: Vec<Moments<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return config_err(format!("learning rate must be positive, got {lr}"));
        }
        Ok(Self { kind, lr: T::lit(lr), step: 0, moments: Vec::new() })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update over `params`, paired positionally with `grads`.
    pub fn apply(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(&grads).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::Config("parameter / gradient shape mismatch".into()));
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (pv, &gv) in p.iter_mut().zip(g) {
                        *pv -= self.lr * gv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.moments.is_empty() {
                    self.moments = grads
                        .iter()
                        .map(|g| Moments { m: vec![T::zero(); g.len()], v: vec![T::zero(); g.len()] })
                        .collect();
                } else if self.moments.len() != grads.len()
                    || self.moments.iter().zip(&grads).any(|(m, g)| m.m.len() != g.len())
                {
                    return Err(Error::Config("optimizer state belongs to another parameter set".into()));
                }
                self.step += 1;
                let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                let bc1 = T::one() - b1.powi(self.step);
                let bc2 = T::one() - b2.powi(self.step);
                for ((p, g), st) in params.into_iter().zip(grads).zip(&mut self.moments) {
                    for j in 0..p.len() {
                        let gj = g[j];
                        st.m[j] = b1 * st.m[j] + (T::one() - b1) * gj;
                        st.v[j] = b2 * st.v[j] + (T::one() - b2) * gj * gj;
                        let m_hat = st.m[j] / bc1;
                        let v_hat = st.v[j] / bc2;
                        p[j] -= self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Updates gamma/beta of every batch-norm layer; nothing else is touched.
    pub fn step_bn(&mut self, stack: &mut LayerStack<T>, grads: &GradientSet<T>) -> Result<()> {
        if grads.layers.len() != stack.num_batch_norms() {
            return Err(Error::Config("gradient set does not match the stack".into()));
        }
        let mut params = Vec::with_capacity(2 * grads.layers.len());
        for bn in stack.batch_norms_mut() {
            params.push(bn.gamma.as_mut_slice());
            params.push(bn.beta.as_mut_slice());
        }
        let g = grads
            .layers
            .iter()
            .flat_map(|g| [g.d_gamma.as_slice(), g.d_beta.as_slice()])
            .collect();
        self.apply(params, g)
    }
}
