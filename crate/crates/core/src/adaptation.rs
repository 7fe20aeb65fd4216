//! Per-batch test-time adaptation.
//!
//! Each step draws one augmented view of the batch, scores it with the
//! adapting and EMA models, turns the two entropy filters into per-sample loss
//! coefficients, takes one optimizer step on the adapting model's batch-norm
//! affine parameters, predicts, and finally moves the EMA model toward the
//! adapting one.

use std::hash::{Hash, Hasher};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::kip::{self, KipOutput};
use crate::nn::{
    backward_entropy_objective, forward, logits, softmax_entropy, LayerStack, NormMode, Optimizer,
    OptimizerKind,
};
use crate::rng::{derive_rng, Component};
use crate::scalar::Scalar;
use crate::stream::{augment, AugmentConfig, LabeledBatch};
use crate::tensor::{argmax, Matrix};

pub use crate::kip::energy_score;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Frozen source model; no adaptation.
    Source,
    /// Entropy minimization on every sample.
    Tent,
    /// Minimize where the adapting model's entropy is below τ, maximize elsewhere.
    AdaptFilter,
    /// Same gate as `AdaptFilter`, driven by the EMA model's entropy.
    EmaFilter,
    /// Primary-auxiliary filtering.
    Paf,
}

/// Which filters the primary-auxiliary loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterSet {
    #[default]
    Both,
    /// Auxiliary filter pinned to 1: unit-weight minimization where `F_pr = 1`,
    /// everything else excluded.
    PrimaryOnly,
    /// The auxiliary filter takes the primary filter's place.
    AuxiliaryOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Weight of the entropy-maximization term.
    pub alpha: f64,
    /// EMA decay.
    pub beta: f64,
    /// KIP sharpness.
    pub gamma: f64,
    /// τ = tau_factor · ln C unless `tau` is set.
    pub tau_factor: f64,
    pub tau: Option<f64>,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub augment: AugmentConfig,
    pub method: Method,
    pub filters: FilterSet,
    pub kip_enabled: bool,
    pub soft_min: bool,
    pub hard_max: bool,
    /// Feed the augmented view (rather than the raw batch) to the adapting
    /// and EMA models at prediction time.
    pub kip_augmented_views: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 0.999,
            gamma: 0.1,
            tau_factor: 0.4,
            tau: None,
            lr: 0.001,
            optimizer: OptimizerKind::ADAM_DEFAULT,
            augment: AugmentConfig::default(),
            method: Method::Paf,
            filters: FilterSet::Both,
            kip_enabled: true,
            soft_min: true,
            hard_max: true,
            kip_augmented_views: true,
        }
    }
}

impl Hyperparams {
    pub fn tau_for(&self, num_classes: usize) -> f64 {
        self.tau.unwrap_or(self.tau_factor * (num_classes as f64).ln())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return config_err("alpha must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return config_err("beta must lie in [0, 1]");
        }
        if !(self.gamma >= 0.0) {
            return config_err("gamma must be non-negative");
        }
        if let Some(t) = self.tau {
            if !(t > 0.0) {
                return config_err("tau must be positive");
            }
        } else if !(self.tau_factor > 0.0) {
            return config_err("tau_factor must be positive");
        }
        if !(self.lr > 0.0) {
            return config_err("learning rate must be positive");
        }
        if !(self.augment.std >= 0.0) || !(0.0..=1.0).contains(&self.augment.flip_prob) {
            return config_err("invalid augmentation settings");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    MinimizeWeighted,
    Excluded,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub h_adapt: f64,
    pub h_ema: f64,
    pub f_pr: bool,
    pub f_aux: bool,
    /// `exp(τ − h_ema)`; only consumed under `MinimizeWeighted`.
    pub w_soft: f64,
    pub action: Action,
}

impl FilterDecision {
    /// Primary-auxiliary case analysis.
    pub fn classify(h_adapt: f64, h_ema: f64, tau: f64) -> Self {
        let f_pr = h_adapt < tau;
        let f_aux = h_ema < tau;
        let action = match (f_pr, f_aux) {
            (true, _) => Action::MinimizeWeighted,
            (false, true) => Action::Excluded,
            (false, false) => Action::Maximize,
        };
        Self { h_adapt, h_ema, f_pr, f_aux, w_soft: (tau - h_ema).exp(), action }
    }

    /// Whether `action` follows from `(f_pr, f_aux)` and `w_soft = exp(τ − h_ema)`.
    pub fn is_consistent(&self, tau: f64) -> bool {
        let expected = match (self.f_pr, self.f_aux) {
            (true, _) => Action::MinimizeWeighted,
            (false, true) => Action::Excluded,
            (false, false) => Action::Maximize,
        };
        self.action == expected
            && self.f_pr == (self.h_adapt < tau)
            && self.f_aux == (self.h_ema < tau)
            && self.w_soft == (tau - self.h_ema).exp()
    }
}

pub fn decide_filters(h_adapt: &[f64], h_ema: &[f64], tau: f64) -> Vec<FilterDecision> {
    h_adapt
        .iter()
        .zip(h_ema)
        .map(|(&a, &e)| FilterDecision::classify(a, e, tau))
        .collect()
}

/// Coefficients of the primary-auxiliary loss, one per sample:
/// `w_soft` (or 1 with `soft_min = false`) to minimize, `0` to exclude and
/// `−α` to maximize. With `hard_max = false` no sample is excluded from
/// maximization by the auxiliary filter.
pub fn paf_loss_coeffs(decisions: &mut [FilterDecision], hp: &Hyperparams) -> Vec<f64> {
    decisions
        .iter_mut()
        .map(|d| {
            let (gate, weight) = match hp.filters {
                FilterSet::Both => (d.f_pr, if hp.soft_min { d.w_soft } else { 1.0 }),
                FilterSet::PrimaryOnly => (d.f_pr, 1.0),
                FilterSet::AuxiliaryOnly => (d.f_aux, if hp.soft_min { d.w_soft } else { 1.0 }),
            };
            // with the auxiliary filter pinned to 1 nothing reaches the maximization branch
            let vetoed = match hp.filters {
                FilterSet::Both => hp.hard_max && d.f_aux,
                FilterSet::PrimaryOnly => true,
                FilterSet::AuxiliaryOnly => false,
            };
            if gate {
                d.action = Action::MinimizeWeighted;
                weight
            } else if vetoed {
                d.action = Action::Excluded;
                0.0
            } else {
                d.action = Action::Maximize;
                -hp.alpha
            }
        })
        .collect()
}

/// Coefficients for the reference methods. Entropy maximization uses a unit
/// coefficient.
pub fn baseline_loss_coeffs(method: Method, decisions: &mut [FilterDecision]) -> Result<Vec<f64>> {
    let gate = |d: &FilterDecision| match method {
        Method::Tent => Ok(true),
        Method::AdaptFilter => Ok(d.f_pr),
        Method::EmaFilter => Ok(d.f_aux),
        other => Err(Error::Config(format!("{other:?} is not a baseline loss"))),
    };
    decisions
        .iter_mut()
        .map(|d| {
            if gate(d)? {
                d.action = Action::MinimizeWeighted;
                Ok(1.0)
            } else {
                d.action = Action::Maximize;
                Ok(-1.0)
            }
        })
        .collect()
}

/// `ema ← β·ema + (1−β)·adapting` over batch-norm gamma/beta.
pub fn ema_update<T: Scalar>(ema: &mut LayerStack<T>, adapting: &LayerStack<T>, beta: T) -> Result<()> {
    ema.check_same_shape(adapting)?;
    let keep = T::one() - beta;
    for (e, a) in ema.batch_norms_mut().zip(adapting.batch_norms()) {
        for (ev, &av) in e.gamma.iter_mut().zip(&a.gamma) {
            *ev = beta * *ev + keep * av;
        }
        for (ev, &av) in e.beta.iter_mut().zip(&a.beta) {
            *ev = beta * *ev + keep * av;
        }
    }
    Ok(())
}

/// Source, adapting and EMA parameter sets sharing one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTriple<T> {
    source: LayerStack<T>,
    pub adapting: LayerStack<T>,
    pub ema: LayerStack<T>,
}

impl<T: Scalar> ModelTriple<T> {
    pub fn new(source: LayerStack<T>) -> Self {
        Self { adapting: source.clone(), ema: source.clone(), source }
    }

    pub fn source(&self) -> &LayerStack<T> {
        &self.source
    }
}

/// Everything recorded about one adaptation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub domain_index: usize,
    pub labels: Vec<usize>,
    pub open_flags: Vec<bool>,
    pub decisions: Vec<FilterDecision>,
    pub coeffs: Vec<f64>,
    pub energy_score: Vec<f64>,
    /// Per-sample (source, adapting, ema) weights; empty when KIP is off.
    pub kip_weights: Vec<[f64; 3]>,
    pub predicted: Vec<usize>,
    /// `(1/B) Σ coeff_i · H_i` before the update.
    pub loss: f64,
    pub loss_min: f64,
    pub loss_max: f64,
    pub updated: bool,
    /// Hash of the augmented batch shared by filtering, loss and prediction.
    pub augment_fingerprint: u64,
}

pub fn fingerprint<T: Scalar>(x: &Matrix<T>) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    x.shape().hash(&mut h);
    for v in x.as_slice() {
        v.as_f64().to_bits().hash(&mut h);
    }
    h.finish()
}

/// Owns one run's model triple, optimizer state and augmentation stream.
#[derive(Debug, Clone)]
pub struct Adapter<T> {
    triple: ModelTriple<T>,
    optimizer: Optimizer<T>,
    hp: Hyperparams,
    tau: f64,
    augment_rng: ChaCha8Rng,
    steps: usize,
}

impl<T: Scalar> Adapter<T> {
    pub fn new(source: LayerStack<T>, hp: Hyperparams, run_seed: u64) -> Result<Self> {
        hp.validate()?;
        let tau = hp.tau_for(source.num_classes());
        Ok(Self {
            triple: ModelTriple::new(source),
            optimizer: Optimizer::new(hp.optimizer, hp.lr)?,
            hp,
            tau,
            augment_rng: derive_rng(run_seed, Component::Augment, 0),
            steps: 0,
        })
    }

    pub fn triple(&self) -> &ModelTriple<T> {
        &self.triple
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn augment_rng(&self) -> &ChaCha8Rng {
        &self.augment_rng
    }

    /// Filter, loss, update, predict, then the EMA update.
    pub fn step(&mut self, batch: &LabeledBatch) -> Result<StepLog> {
        let hp = &self.hp;
        let x: Matrix<T> = batch.features_as();
        let x_tilde = augment(&x, &hp.augment, &mut self.augment_rng);
        let fp = fingerprint(&x_tilde);

        let (_, cache) = forward(&self.triple.adapting, &x_tilde, NormMode::BatchStats)?;
        let z_ema = logits(&self.triple.ema, &x_tilde, NormMode::BatchStats)?;
        let (_, h_adapt) = softmax_entropy(cache.logits());
        let (_, h_ema) = softmax_entropy(&z_ema);
        let h_adapt: Vec<f64> = h_adapt.into_iter().map(Scalar::as_f64).collect();
        let h_ema: Vec<f64> = h_ema.into_iter().map(Scalar::as_f64).collect();
        let mut decisions = decide_filters(&h_adapt, &h_ema, self.tau);

        let coeffs = match hp.method {
            Method::Source => {
                decisions.iter_mut().for_each(|d| d.action = Action::Excluded);
                vec![0.0; decisions.len()]
            }
            Method::Paf => paf_loss_coeffs(&mut decisions, hp),
            m => baseline_loss_coeffs(m, &mut decisions)?,
        };
        let b = coeffs.len() as f64;
        let (mut loss_min, mut loss_max) = (0.0, 0.0);
        for (&c, &h) in coeffs.iter().zip(&h_adapt) {
            if c > 0.0 {
                loss_min += c * h / b;
            } else if c < 0.0 {
                loss_max += c * h / b;
            }
        }

        let updated = coeffs.iter().any(|&c| c != 0.0);
        if updated {
            let tc: Vec<T> = coeffs.iter().map(|&c| T::lit(c)).collect();
            let grads = backward_entropy_objective(&self.triple.adapting, &cache, &tc)?;
            self.optimizer.step_bn(&mut self.triple.adapting, &grads)?;
        }

        let (predicted, energy, kip_weights) = if hp.method == Method::Source {
            let z = logits(self.triple.source(), &x, NormMode::RunningStats)?;
            (z.iter_rows().map(argmax).collect(), kip::energy_score(&z), Vec::new())
        } else {
            let z_raw = logits(&self.triple.adapting, &x, NormMode::BatchStats)?;
            let energy = kip::energy_score(&z_raw);
            if hp.kip_enabled {
                let KipOutput { weights, labels, .. } = if hp.kip_augmented_views {
                    let za = logits(&self.triple.adapting, &x_tilde, NormMode::BatchStats)?;
                    let zs = logits(self.triple.source(), &x, NormMode::RunningStats)?;
                    kip::combine(&zs, &za, &z_ema, T::lit(hp.gamma))?
                } else {
                    kip::kip_predict(
                        self.triple.source(),
                        &self.triple.adapting,
                        &self.triple.ema,
                        &x,
                        &x,
                        T::lit(hp.gamma),
                    )?
                };
                let w = weights.iter().map(|c| c.map(Scalar::as_f64)).collect();
                (labels, energy, w)
            } else {
                (z_raw.iter_rows().map(argmax).collect(), energy, Vec::new())
            }
        };

        if hp.method != Method::Source {
            ema_update(&mut self.triple.ema, &self.triple.adapting, T::lit(hp.beta))?;
        }

        let log = StepLog {
            step: self.steps,
            domain_index: batch.domain_index,
            labels: batch.labels.clone(),
            open_flags: batch.open_flags.clone(),
            decisions,
            coeffs,
            energy_score: energy.into_iter().map(Scalar::as_f64).collect(),
            kip_weights,
            predicted,
            loss: loss_min + loss_max,
            loss_min,
            loss_max,
            updated,
            augment_fingerprint: fp,
        };
        self.steps += 1;
        Ok(log)
    }
}
