//! Test fixtures and an independent reference implementation of the forward
//! pass. The reference works on nested `Vec`s and shares no arithmetic with
//! the library.

#![allow(dead_code, clippy::needless_range_loop)]

use ostta_core::nn::{Activation, BatchNorm, Dense, Layer, LayerStack, NormMode};
use ostta_core::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A Dense→BN→ReLU stack with every parameter (including BN affine and
/// running statistics) drawn at random.
pub fn random_stack(rng: &mut ChaCha8Rng, input: usize, hidden: &[usize], classes: usize) -> LayerStack<f64> {
    let mut layers = Vec::new();
    let mut prev = input;
    for &h in hidden {
        layers.push(Layer::Dense(random_dense(rng, prev, h)));
        layers.push(Layer::BatchNorm(BatchNorm {
            gamma: (0..h).map(|_| rng.gen_range(0.5..1.5)).collect(),
            beta: (0..h).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            running_mean: (0..h).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            running_var: (0..h).map(|_| rng.gen_range(0.5..2.0)).collect(),
            eps: 1e-5,
        }));
        layers.push(Layer::Activation { activation: Activation::Relu });
        prev = h;
    }
    layers.push(Layer::Dense(random_dense(rng, prev, classes)));
    LayerStack::from_layers(layers).unwrap()
}

fn random_dense(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Dense<f64> {
    let scale = (2.0 / fan_in as f64).sqrt();
    Dense {
        weights: Matrix::from_vec(
            fan_in,
            fan_out,
            (0..fan_in * fan_out).map(|_| rng.gen_range(-1.0..1.0) * scale).collect(),
        )
        .unwrap(),
        bias: (0..fan_out).map(|_| rng.gen_range(-0.2..0.2)).collect(),
    }
}

pub fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

pub fn to_rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

/// Straight-line forward pass.
pub fn reference_forward(stack: &LayerStack<f64>, x: &[Vec<f64>], mode: NormMode) -> Vec<Vec<f64>> {
    let mut h: Vec<Vec<f64>> = x.to_vec();
    for layer in stack.layers() {
        h = match layer {
            Layer::Dense(d) => {
                let (n_in, n_out) = d.weights.shape();
                h.iter()
                    .map(|row| {
                        (0..n_out)
                            .map(|o| {
                                let mut s = d.bias[o];
                                for i in 0..n_in {
                                    s += row[i] * d.weights[(i, o)];
                                }
                                s
                            })
                            .collect()
                    })
                    .collect()
            }
            Layer::BatchNorm(bn) => {
                let n = h.len() as f64;
                let dim = bn.gamma.len();
                let mut out = h.clone();
                for j in 0..dim {
                    let (mean, var) = match mode {
                        NormMode::RunningStats => (bn.running_mean[j], bn.running_var[j]),
                        NormMode::BatchStats => {
                            let mean = h.iter().map(|r| r[j]).sum::<f64>() / n;
                            let var = h.iter().map(|r| (r[j] - mean) * (r[j] - mean)).sum::<f64>() / n;
                            (mean, var)
                        }
                    };
                    let denom = (var + bn.eps).sqrt();
                    for (o, r) in out.iter_mut().zip(&h) {
                        o[j] = bn.gamma[j] * (r[j] - mean) / denom + bn.beta[j];
                    }
                }
                out
            }
            Layer::Activation { .. } => h.iter().map(|r| r.iter().map(|&v| v.max(0.0)).collect()).collect(),
        };
    }
    h
}

pub fn reference_entropy(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    -e.iter().map(|v| v / s).filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// `(1/B) Σ coeff_i · H_i` under batch statistics.
pub fn reference_objective(stack: &LayerStack<f64>, x: &[Vec<f64>], coeffs: &[f64]) -> f64 {
    let z = reference_forward(stack, x, NormMode::BatchStats);
    let b = x.len() as f64;
    z.iter().zip(coeffs).map(|(row, c)| c * reference_entropy(row)).sum::<f64>() / b
}

pub fn rel_close(a: f64, b: f64, rel: f64, abs_floor: f64) -> bool {
    let diff = (a - b).abs();
    diff <= abs_floor || diff <= rel * a.abs().max(b.abs())
}

/// Outcome of comparing analytic BN gradients with central differences.
#[derive(Debug, Default)]
pub struct GradCheck {
    pub entries: usize,
    pub failures: Vec<String>,
    pub worst_abs: f64,
    /// Largest relative error among entries with magnitude above 1e-6.
    pub worst_rel: f64,
}

/// Compares every BN gamma/beta gradient with central finite differences of
/// the reference objective.
pub fn finite_difference_check(
    stack: &LayerStack<f64>,
    x: &Matrix<f64>,
    coeffs: &[f64],
    h: f64,
    rel: f64,
    abs_floor: f64,
) -> GradCheck {
    let (_, cache) = ostta_core::nn::forward(stack, x, NormMode::BatchStats).unwrap();
    let grads = ostta_core::nn::backward_entropy_objective(stack, &cache, coeffs).unwrap();
    let xs = to_rows(x);
    let mut out = GradCheck::default();
    let bn_layers: Vec<usize> = stack
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::BatchNorm(_)))
        .map(|(i, _)| i)
        .collect();
    for (k, &li) in bn_layers.iter().enumerate() {
        let dim = match &stack.layers()[li] {
            Layer::BatchNorm(bn) => bn.gamma.len(),
            _ => unreachable!(),
        };
        for which in 0..2 {
            for j in 0..dim {
                let perturbed = |delta: f64| {
                    let mut s = stack.clone();
                    if let Layer::BatchNorm(bn) = &mut s.layers_mut()[li] {
                        if which == 0 {
                            bn.gamma[j] += delta;
                        } else {
                            bn.beta[j] += delta;
                        }
                    }
                    reference_objective(&s, &xs, coeffs)
                };
                let numeric = (perturbed(h) - perturbed(-h)) / (2.0 * h);
                let g = &grads.layers[k];
                let analytic = if which == 0 { g.d_gamma[j] } else { g.d_beta[j] };
                out.entries += 1;
                let diff = (analytic - numeric).abs();
                let scale = analytic.abs().max(numeric.abs());
                out.worst_abs = out.worst_abs.max(diff);
                if scale > 1e-6 {
                    out.worst_rel = out.worst_rel.max(diff / scale);
                }
                if !rel_close(analytic, numeric, rel, abs_floor) {
                    out.failures.push(format!(
                        "bn {k} {} [{j}]: analytic {analytic:e} numeric {numeric:e}",
                        if which == 0 { "gamma" } else { "beta" }
                    ));
                }
            }
        }
    }
    out
}

/// Random gradient-check configuration: up to three Dense layers, d ≤ 8.
pub fn random_grad_config(rng: &mut ChaCha8Rng, batch: usize) -> (LayerStack<f64>, Matrix<f64>, Vec<f64>) {
    let d = rng.gen_range(1..=8);
    let n_hidden = rng.gen_range(1..=2);
    let hidden: Vec<usize> = (0..n_hidden).map(|_| rng.gen_range(2..=6)).collect();
    let classes = rng.gen_range(2..=5);
    let stack = random_stack(rng, d, &hidden, classes);
    let x = random_batch(rng, batch, d);
    let coeffs = (0..batch)
        .map(|_| match rng.gen_range(0..4) {
            0 => 0.0,
            1 => -2.0,
            _ => rng.gen_range(-2.0..2.0),
        })
        .collect();
    (stack, x, coeffs)
}
