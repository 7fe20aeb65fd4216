//! Synthetic continual open-set stream.
//!
//! Closed-set classes are isotropic Gaussian blobs; open-set classes are
//! blobs placed in the same bounding box. Each domain applies one
//! [`DomainTransform`] (rotation, per-feature scale, shift, additive noise)
//! to every point of the batch, closed and open alike.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::nn::LabeledData;
use crate::rng::{derive_rng, Component};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub mean: Vec<f64>,
    pub std: f64,
    pub label: usize,
    pub is_open: bool,
}

/// Where open-set class means are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpenPlacement {
    /// Uniformly from the same box as the closed-set means.
    Uniform,
    /// Random convex combination of 2..=`open_mix_max` closed-set means, so
    /// open data sits among the closed classes rather than beside them.
    Between,
}

/// Ranges the per-domain shift parameters are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    /// Additive noise std range, in units of the class std.
    pub noise_range: [f64; 2],
    /// Upper bound of the rotation intensity knob (0 = identity).
    pub max_rotation: f64,
    /// Per-feature scales are drawn log-uniformly from `[1/s, s]`.
    pub max_scale: f64,
    /// Std of the per-feature shift, in units of the class std.
    pub shift_std: f64,
    pub first_domain_identity: bool,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            noise_range: [0.1, 1.0],
            max_rotation: 1.2,
            max_scale: 2.0,
            shift_std: 1.0,
            first_domain_identity: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub num_domains: usize,
    pub batches_per_domain: usize,
    pub batch_size: usize,
    /// Open : closed ratio within each batch.
    pub open_ratio: f64,
    pub dim: usize,
    pub num_classes: usize,
    pub num_open_classes: usize,
    /// Seeds task generation (class geometry, domains, source data).
    pub seed: u64,
    pub class_std: f64,
    /// Class means are drawn uniformly from `[-box, box]^d`.
    pub mean_box: f64,
    /// Minimum distance between closed-set means, in class stds.
    pub min_separation: f64,
    /// Minimum distance from an open-set mean to any closed-set mean, in class stds.
    pub open_min_separation: f64,
    pub open_placement: OpenPlacement,
    /// Largest number of closed-set means mixed into one open-set mean.
    pub open_mix_max: usize,
    pub source_per_class: usize,
    pub holdout_per_class: usize,
    pub shift: ShiftConfig,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            num_domains: 15,
            batches_per_domain: 100,
            batch_size: 200,
            open_ratio: 1.0,
            dim: 16,
            num_classes: 8,
            num_open_classes: 4,
            seed: 0,
            class_std: 1.0,
            mean_box: 2.0,
            min_separation: 3.0,
            open_min_separation: 3.0,
            open_placement: OpenPlacement::Uniform,
            open_mix_max: 3,
            source_per_class: 500,
            holdout_per_class: 250,
            shift: ShiftConfig::default(),
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return config_err("batch size must be at least 2");
        }
        if !(self.open_ratio >= 0.0) || !self.open_ratio.is_finite() {
            return config_err("open ratio must be finite and non-negative");
        }
        if self.num_classes < 2 || self.dim == 0 {
            return config_err("need at least two classes and one feature");
        }
        if self.num_domains == 0 || self.batches_per_domain == 0 {
            return config_err("stream must contain at least one batch");
        }
        if self.open_count() > 0 && self.num_open_classes == 0 {
            return config_err("open ratio > 0 requires at least one open-set class");
        }
        if self.open_count() == self.batch_size {
            return config_err("every batch needs at least one closed-set sample");
        }
        if !(self.class_std > 0.0) || !(self.mean_box > 0.0) {
            return config_err("class std and mean box must be positive");
        }
        let [lo, hi] = self.shift.noise_range;
        if !(0.0 <= lo && lo <= hi) || !(self.shift.max_scale >= 1.0) || self.shift.max_rotation < 0.0 {
            return config_err("invalid shift ranges");
        }
        Ok(())
    }

    /// `floor(B·ρ/(1+ρ))`.
    pub fn open_count(&self) -> usize {
        let b = self.batch_size as f64;
        (b * self.open_ratio / (1.0 + self.open_ratio)).floor() as usize
    }

    pub fn closed_count(&self) -> usize {
        self.batch_size - self.open_count()
    }

    pub fn total_batches(&self) -> usize {
        self.num_domains * self.batches_per_domain
    }
}

/// `x ↦ R·(s ⊙ x) + shift + ε`, `ε ~ N(0, noise_std²·I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainTransform {
    pub rotation: Matrix<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub noise_std: f64,
}

impl DomainTransform {
    pub fn identity(dim: usize) -> Self {
        Self {
            rotation: Matrix::identity(dim),
            scale: vec![1.0; dim],
            shift: vec![0.0; dim],
            noise_std: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    /// Transforms one point in place; draws `dim` normals only when noise is on.
    pub fn apply<R: Rng + ?Sized>(&self, x: &mut [f64], rng: &mut R) {
        let d = self.dim();
        let scaled: Vec<f64> = x.iter().zip(&self.scale).map(|(v, s)| v * s).collect();
        for j in 0..d {
            let r = self.rotation.row(j);
            x[j] = crate::tensor::dot(r, &scaled) + self.shift[j];
        }
        if self.noise_std > 0.0 {
            for v in x.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += self.noise_std * z;
            }
        }
    }

    /// max |RᵀR − I|.
    pub fn orthogonality_error(&self) -> f64 {
        let rtr = self.rotation.transpose().matmul(&self.rotation).expect("square");
        let mut worst: f64 = 0.0;
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((rtr[(i, j)] - target).abs());
            }
        }
        worst
    }
}

/// Orthogonal matrix `(I − K)⁻¹(I + K)` with `K = (t/2)·A`, `A` a random
/// skew-symmetric matrix. `t = 0` gives the identity.
pub fn random_rotation<R: Rng + ?Sized>(dim: usize, intensity: f64, rng: &mut R) -> Matrix<f64> {
    let mut k = Matrix::<f64>::zeros(dim, dim);
    let scale = 0.5 * intensity / (dim as f64).sqrt();
    for i in 0..dim {
        for j in (i + 1)..dim {
            let z: f64 = StandardNormal.sample(rng);
            k[(i, j)] = scale * z;
            k[(j, i)] = -scale * z;
        }
    }
    let mut lhs = Matrix::identity(dim);
    let mut rhs = Matrix::identity(dim);
    for i in 0..dim {
        for j in 0..dim {
            lhs[(i, j)] -= k[(i, j)];
            rhs[(i, j)] += k[(i, j)];
        }
    }
    let mut q = solve(lhs, rhs);
    gram_schmidt_columns(&mut q);
    q
}

/// Solves `A·X = B` by Gaussian elimination with partial pivoting.
fn solve(mut a: Matrix<f64>, mut b: Matrix<f64>) -> Matrix<f64> {
    let n = a.rows();
    let m = b.cols();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))
            .expect("non-empty");
        if pivot != col {
            for c in 0..n {
                let t = a[(col, c)];
                a[(col, c)] = a[(pivot, c)];
                a[(pivot, c)] = t;
            }
            for c in 0..m {
                let t = b[(col, c)];
                b[(col, c)] = b[(pivot, c)];
                b[(pivot, c)] = t;
            }
        }
        let p = a[(col, col)];
        for r in (col + 1)..n {
            let f = a[(r, col)] / p;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[(r, c)] -= f * a[(col, c)];
            }
            for c in 0..m {
                b[(r, c)] -= f * b[(col, c)];
            }
        }
    }
    let mut x = Matrix::zeros(n, m);
    for r in (0..n).rev() {
        for c in 0..m {
            let mut acc = b[(r, c)];
            for k in (r + 1)..n {
                acc -= a[(r, k)] * x[(k, c)];
            }
            x[(r, c)] = acc / a[(r, r)];
        }
    }
    x
}

/// Modified Gram-Schmidt on the columns, in place.
fn gram_schmidt_columns(q: &mut Matrix<f64>) {
    let n = q.rows();
    for j in 0..q.cols() {
        for prev in 0..j {
            let proj: f64 = (0..n).map(|i| q[(i, j)] * q[(i, prev)]).sum();
            for i in 0..n {
                q[(i, j)] -= proj * q[(i, prev)];
            }
        }
        let norm = (0..n).map(|i| q[(i, j)] * q[(i, j)]).sum::<f64>().sqrt();
        for i in 0..n {
            q[(i, j)] /= norm;
        }
    }
}

/// Generated task: class geometry, domain sequence and source-domain data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub config: StreamConfig,
    pub closed_classes: Vec<ClassSpec>,
    pub open_classes: Vec<ClassSpec>,
    pub domains: Vec<DomainTransform>,
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

pub fn make_task(config: &StreamConfig) -> Result<Task> {
    config.validate()?;
    let mut rng = derive_rng(config.seed, Component::Task, 0);
    let d = config.dim;
    let std = config.class_std;
    let mut draw_mean = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..d).map(|_| rng.gen_range(-config.mean_box..=config.mean_box)).collect()
    };

    let mut closed_means: Vec<Vec<f64>> = Vec::with_capacity(config.num_classes);
    for _ in 0..config.num_classes {
        let min_dist = config.min_separation * std;
        let mean = place(&mut rng, &mut draw_mean, |m| {
            closed_means.iter().all(|o| distance(m, o) >= min_dist)
        })
        .ok_or_else(|| {
            Error::Config(format!(
                "cannot place {} means {min_dist} apart in {d} dimensions",
                config.num_classes
            ))
        })?;
        closed_means.push(mean);
    }
    let mut open_means: Vec<Vec<f64>> = Vec::with_capacity(config.num_open_classes);
    for _ in 0..config.num_open_classes {
        let min_dist = config.open_min_separation * std;
        let accept = |m: &[f64]| closed_means.iter().all(|o| distance(m, o) >= min_dist);
        let mean = match config.open_placement {
            OpenPlacement::Uniform => place(&mut rng, &mut draw_mean, accept),
            OpenPlacement::Between => {
                let mut between = |rng: &mut ChaCha8Rng| {
                    let k = rng.gen_range(2..=config.open_mix_max.clamp(2, closed_means.len()));
                    let picks = rand::seq::index::sample(rng, closed_means.len(), k);
                    let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
                    let total: f64 = w.iter().sum();
                    let mut m = vec![0.0; d];
                    for (wi, ci) in w.iter().zip(picks.iter()) {
                        for (mj, cj) in m.iter_mut().zip(&closed_means[ci]) {
                            *mj += wi / total * cj;
                        }
                    }
                    m
                };
                place(&mut rng, &mut between, accept)
            }
        }
        .ok_or_else(|| Error::Config("cannot place open-set means away from closed means".into()))?;
        open_means.push(mean);
    }

    let closed_classes = closed_means
        .into_iter()
        .enumerate()
        .map(|(label, mean)| ClassSpec { mean, std, label, is_open: false })
        .collect();
    let open_classes = open_means
        .into_iter()
        .enumerate()
        .map(|(k, mean)| ClassSpec { mean, std, label: config.num_classes + k, is_open: true })
        .collect();

    let shift = &config.shift;
    let domains = (0..config.num_domains)
        .map(|i| {
            if i == 0 && shift.first_domain_identity {
                return DomainTransform::identity(d);
            }
            let intensity = rng.gen_range(0.0..=shift.max_rotation);
            let rotation = random_rotation(d, intensity, &mut rng);
            let log_s = shift.max_scale.ln();
            let scale = (0..d)
                .map(|_| if log_s > 0.0 { rng.gen_range(-log_s..=log_s).exp() } else { 1.0 })
                .collect();
            let shift_v = (0..d)
                .map(|_| shift.shift_std * std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let [lo, hi] = shift.noise_range;
            let noise_std = std * if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            DomainTransform { rotation, scale, shift: shift_v, noise_std }
        })
        .collect();

    Ok(Task { config: config.clone(), closed_classes, open_classes, domains })
}

fn place(
    rng: &mut ChaCha8Rng,
    draw: &mut impl FnMut(&mut ChaCha8Rng) -> Vec<f64>,
    accept: impl Fn(&[f64]) -> bool,
) -> Option<Vec<f64>> {
    (0..MAX_PLACEMENT_ATTEMPTS).map(|_| draw(rng)).find(|m| accept(m))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn sample_point<R: Rng + ?Sized>(spec: &ClassSpec, rng: &mut R) -> Vec<f64> {
    spec.mean
        .iter()
        .map(|&m| m + spec.std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

impl Task {
    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn clean_closed_data(&self, per_class: usize, component: Component) -> LabeledData<f64> {
        let mut rng = derive_rng(self.config.seed, component, 0);
        let mut rows = Vec::with_capacity(per_class * self.closed_classes.len());
        let mut labels = Vec::with_capacity(rows.capacity());
        for _ in 0..per_class {
            for spec in &self.closed_classes {
                rows.push(sample_point(spec, &mut rng));
                labels.push(spec.label);
            }
        }
        LabeledData {
            features: Matrix::from_rows(&rows).expect("uniform width"),
            labels,
        }
    }

    /// Untransformed labeled closed-set data for source training.
    pub fn source_dataset(&self) -> LabeledData<f64> {
        self.clean_closed_data(self.config.source_per_class, Component::SourceData)
    }

    /// Held-out clean closed-set data, disjoint draws from `source_dataset`.
    pub fn holdout_dataset(&self) -> LabeledData<f64> {
        self.clean_closed_data(self.config.holdout_per_class, Component::Holdout)
    }

    pub fn stream(&self, run_seed: u64) -> Stream<'_> {
        Stream { task: self, rng: derive_rng(run_seed, Component::Stream, 0), position: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub features: Matrix<f64>,
    pub labels: Vec<usize>,
    pub open_flags: Vec<bool>,
    pub domain_index: usize,
    pub batch_index: usize,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_open(&self) -> usize {
        self.open_flags.iter().filter(|&&o| o).count()
    }

    pub fn features_as<T: Scalar>(&self) -> Matrix<T> {
        self.features.cast()
    }
}

/// Sequential iterator over the batches of a task.
#[derive(Debug, Clone)]
pub struct Stream<'a> {
    task: &'a Task,
    rng: ChaCha8Rng,
    position: usize,
}

impl Stream<'_> {
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn next_batch(&mut self) -> Result<LabeledBatch> {
        let cfg = &self.task.config;
        if self.position >= cfg.total_batches() {
            return Err(Error::EndOfStream);
        }
        let domain_index = self.position / cfg.batches_per_domain;
        let transform = &self.task.domains[domain_index];
        let n_open = cfg.open_count();
        let n_closed = cfg.batch_size - n_open;

        let mut picks: Vec<&ClassSpec> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..n_closed {
            picks.push(&self.task.closed_classes[self.rng.gen_range(0..self.task.closed_classes.len())]);
        }
        for _ in 0..n_open {
            picks.push(&self.task.open_classes[self.rng.gen_range(0..self.task.open_classes.len())]);
        }
        picks.shuffle(&mut self.rng);

        let mut data = Vec::with_capacity(cfg.batch_size * cfg.dim);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        let mut open_flags = Vec::with_capacity(cfg.batch_size);
        for spec in picks {
            let mut x = sample_point(spec, &mut self.rng);
            transform.apply(&mut x, &mut self.rng);
            data.extend_from_slice(&x);
            labels.push(spec.label);
            open_flags.push(spec.is_open);
        }
        let batch = LabeledBatch {
            features: Matrix::from_vec(cfg.batch_size, cfg.dim, data)?,
            labels,
            open_flags,
            domain_index,
            batch_index: self.position,
        };
        self.position += 1;
        Ok(batch)
    }
}

impl Iterator for Stream<'_> {
    type Item = LabeledBatch;

    fn next(&mut self) -> Option<LabeledBatch> {
        self.next_batch().ok()
    }
}

/// Writes `domain_index,label,open_flag,f0..f{d-1}` rows.
pub fn write_stream_csv<'a, W: Write>(
    w: &mut W,
    dim: usize,
    batches: impl IntoIterator<Item = &'a LabeledBatch>,
) -> Result<()> {
    write!(w, "domain_index,label,open_flag")?;
    for j in 0..dim {
        write!(w, ",f{j}")?;
    }
    writeln!(w)?;
    for b in batches {
        for (i, row) in b.features.iter_rows().enumerate() {
            write!(w, "{},{},{}", b.domain_index, b.labels[i], u8::from(b.open_flags[i]))?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Augmentation: mean-preserving Gaussian jitter scaled by the per-feature
/// batch std, plus an optional reflection of a sample through the batch mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub std: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { std: 0.05, flip_prob: 0.0 }
    }
}

pub fn augment<T: Scalar, R: Rng + ?Sized>(x: &Matrix<T>, cfg: &AugmentConfig, rng: &mut R) -> Matrix<T> {
    if cfg.std == 0.0 && cfg.flip_prob == 0.0 {
        return x.clone();
    }
    let (rows, cols) = x.shape();
    let n = T::from_usize_lossy(rows.max(1));
    let mut mean = vec![T::zero(); cols];
    for r in x.iter_rows() {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut std = vec![T::zero(); cols];
    for r in x.iter_rows() {
        for ((s, &v), &m) in std.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let aug = T::lit(cfg.std);
    std.iter_mut().for_each(|s| *s = s.sqrt() * aug);

    let mut out = x.clone();
    for i in 0..rows {
        let flip = cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob.min(1.0));
        let row = out.row_mut(i);
        for j in 0..cols {
            if flip {
                row[j] = mean[j] + mean[j] - row[j];
            }
            if cfg.std > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                row[j] += std[j] * T::lit(z);
            }
        }
    }
    out
}
