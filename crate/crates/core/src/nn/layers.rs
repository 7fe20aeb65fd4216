//! Layer definitions and the multilayer perceptron container.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
        }
    }

    /// Derivative evaluated at the pre-activation input.
    #[inline]
    pub fn derivative<T: Scalar>(self, input: T) -> T {
        match self {
            Activation::Relu => {
                if input > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Fully connected layer, `y = x · W + b` with `W` of shape (in × out).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> BatchNorm<T> {
    /// gamma = 1, beta = 0, running statistics 0 / 1.
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: vec![T::one(); dim],
            beta: vec![T::zero(); dim],
            running_mean: vec![T::zero(); dim],
            running_var: vec![T::one(); dim],
            eps: T::lit(BN_EPS),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer<T> {
    Dense(Dense<T>),
    BatchNorm(BatchNorm<T>),
    Activation { activation: Activation },
}

/// Shape of a Dense→BN→ReLU perceptron.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl ArchSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, num_classes: usize) -> Self {
        Self { input_dim, hidden, num_classes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 || self.hidden.contains(&0) {
            return config_err(format!("degenerate architecture {self:?}"));
        }
        Ok(())
    }
}

/// An ordered stack of layers ending in a Dense layer that emits `C` logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStack<T> {
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> LayerStack<T> {
    /// Validates dimensional consistency and the BN invariants.
    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<Self> {
        let mut width: Option<usize> = None;
        let mut last_dense = None;
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    if d.bias.len() != d.output_dim() {
                        return config_err(format!("layer {i}: bias length mismatch"));
                    }
                    if let Some(w) = width {
                        if w != d.input_dim() {
                            return config_err(format!(
                                "layer {i}: expects input {} but receives {w}",
                                d.input_dim()
                            ));
                        }
                    }
                    width = Some(d.output_dim());
                    last_dense = Some(i);
                }
                Layer::BatchNorm(bn) => {
                    let Some(w) = width else {
                        return config_err(format!("layer {i}: batch norm before any dense layer"));
                    };
                    let n = bn.dim();
                    if n != w
                        || bn.beta.len() != n
                        || bn.running_mean.len() != n
                        || bn.running_var.len() != n
                    {
                        return config_err(format!("layer {i}: batch norm width mismatch"));
                    }
                    if bn.running_var.iter().any(|&v| !(v > T::zero())) || !(bn.eps > T::zero()) {
                        return config_err(format!("layer {i}: running_var and eps must be > 0"));
                    }
                }
                Layer::Activation { .. } => {
                    if width.is_none() {
                        return config_err(format!("layer {i}: activation before any dense layer"));
                    }
                }
            }
        }
        if last_dense.is_none() || last_dense != Some(layers.len() - 1) {
            return config_err("stack must end with a dense layer");
        }
        Ok(Self { layers })
    }

    /// He-normal weights, zero biases, identity batch norms.
    pub fn init<R: Rng + ?Sized>(arch: &ArchSpec, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut layers = Vec::new();
        let mut fan_in = arch.input_dim;
        for &h in &arch.hidden {
            layers.push(Layer::Dense(he_dense(fan_in, h, rng)));
            layers.push(Layer::BatchNorm(BatchNorm::identity(h)));
            layers.push(Layer::Activation { activation: Activation::Relu });
            fan_in = h;
        }
        layers.push(Layer::Dense(he_dense(fan_in, arch.num_classes, rng)));
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        match &self.layers[0] {
            Layer::Dense(d) => d.input_dim(),
            _ => unreachable!("validated stacks start with a dense layer"),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Dense(d)) => d.output_dim(),
            _ => unreachable!("validated stacks end with a dense layer"),
        }
    }

    /// Recovers the architecture when the stack has the canonical
    /// Dense→BN→ReLU layout.
    pub fn arch(&self) -> Option<ArchSpec> {
        let n = self.layers.len();
        if n % 3 != 1 {
            return None;
        }
        let mut hidden = Vec::new();
        for block in self.layers[..n - 1].chunks(3) {
            match block {
                [Layer::Dense(d), Layer::BatchNorm(_), Layer::Activation { .. }] => {
                    hidden.push(d.output_dim())
                }
                _ => return None,
            }
        }
        Some(ArchSpec::new(self.input_dim(), hidden, self.num_classes()))
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm<T>> + '_ {
        self.layers.iter().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm<T>> + '_ {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    pub fn num_batch_norms(&self) -> usize {
        self.batch_norms().count()
    }

    /// True when every non-BN-affine value (Dense weights and biases, BN
    /// running statistics and eps) is bit-identical in both stacks.
    pub fn frozen_parts_equal(&self, other: &Self) -> bool {
        if self.layers.len() != other.layers.len() {
            return false;
        }
        self.layers.iter().zip(&other.layers).all(|pair| match pair {
            (Layer::Dense(a), Layer::Dense(b)) => {
                bits_eq(a.weights.as_slice(), b.weights.as_slice()) && bits_eq(&a.bias, &b.bias)
            }
            (Layer::BatchNorm(a), Layer::BatchNorm(b)) => {
                bits_eq(&a.running_mean, &b.running_mean)
                    && bits_eq(&a.running_var, &b.running_var)
                    && a.eps.to_bits_u64() == b.eps.to_bits_u64()
            }
            (Layer::Activation { activation: a }, Layer::Activation { activation: b }) => a == b,
            _ => false,
        })
    }

    /// Verifies that `other` shares this stack's layer layout and widths.
    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        let same = self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|pair| match pair {
                (Layer::Dense(a), Layer::Dense(b)) => a.weights.shape() == b.weights.shape(),
                (Layer::BatchNorm(a), Layer::BatchNorm(b)) => a.dim() == b.dim(),
                (Layer::Activation { activation: a }, Layer::Activation { activation: b }) => {
                    a == b
                }
                _ => false,
            });
        if same {
            Ok(())
        } else {
            Err(Error::Config("layer stacks have different architectures".into()))
        }
    }

    pub fn cast<U: Scalar>(&self) -> LayerStack<U> {
        let cv = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => Layer::Dense(Dense { weights: d.weights.cast(), bias: cv(&d.bias) }),
                Layer::BatchNorm(bn) => Layer::BatchNorm(BatchNorm {
                    gamma: cv(&bn.gamma),
                    beta: cv(&bn.beta),
                    running_mean: cv(&bn.running_mean),
                    running_var: cv(&bn.running_var),
                    eps: U::lit(bn.eps.as_f64()),
                }),
                Layer::Activation { activation } => Layer::Activation { activation: *activation },
            })
            .collect();
        LayerStack { layers }
    }
}

fn he_dense<T: Scalar, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Dense<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect();
    Dense {
        weights: Matrix::from_vec(fan_in, fan_out, data).expect("sized above"),
        bias: vec![T::zero(); fan_out],
    }
}

trait ToBits {
    fn to_bits_u64(self) -> u64;
}

impl<T: Scalar> ToBits for T {
    fn to_bits_u64(self) -> u64 {
        // f64 holds every f32 exactly, so comparing widened bit patterns is exact.
        self.as_f64().to_bits()
    }
}

fn bits_eq<T: Scalar>(a: &[T], b: &[T]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits_u64() == y.to_bits_u64())
}
