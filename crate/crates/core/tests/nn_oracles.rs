mod common;

use common::*;
use ostta_core::nn::{
    backward_entropy_objective, forward, logits, softmax_entropy, train_source, ArchSpec, BatchNorm, Checkpoint,
    Dense, GradientSet, Layer, LayerStack, NormMode, Optimizer, OptimizerKind, TrainConfig,
};
use ostta_core::rng::{derive_rng, Component};
use ostta_core::Matrix;
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn identity_batch_norm_passes_dense_output_through() {
    let mut r = rng(1);
    let dense = Dense {
        weights: random_batch(&mut r, 3, 4),
        bias: vec![0.1, -0.2, 0.3, 0.0],
    };
    let stack = LayerStack::from_layers(vec![
        Layer::Dense(dense.clone()),
        Layer::BatchNorm(BatchNorm::identity(4)),
        Layer::Dense(Dense { weights: Matrix::identity(4), bias: vec![0.0; 4] }),
    ])
    .unwrap();
    let x = random_batch(&mut r, 5, 3);
    let z = logits(&stack, &x, NormMode::RunningStats).unwrap();
    let plain = LayerStack::from_layers(vec![Layer::Dense(dense)]).unwrap();
    let expected = logits(&plain, &x, NormMode::RunningStats).unwrap();
    for (a, b) in z.as_slice().iter().zip(expected.as_slice()) {
        // identity normalization divides by sqrt(1 + eps)
        assert!((a - b / (1.0f64 + 1e-5).sqrt()).abs() < 1e-15);
        assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
    }
}

#[test]
fn duplicated_sample_normalizes_to_beta() {
    let mut r = rng(2);
    let stack = random_stack(&mut r, 4, &[5], 3);
    let row: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
    let x = Matrix::from_rows(&[row.clone(), row]).unwrap();
    let (z, cache) = forward(&stack, &x, NormMode::BatchStats).unwrap();
    let bn = cache.bn(1).unwrap();
    assert!(bn.batch_var.iter().all(|&v| v == 0.0));
    assert!(bn.normalized.as_slice().iter().all(|&v| v == 0.0));
    // logits = beta through ReLU and the final Dense layer
    let (Layer::BatchNorm(b), Layer::Dense(out)) = (&stack.layers()[1], &stack.layers()[3]) else { panic!() };
    for k in 0..3 {
        let mut want = out.bias[k];
        for j in 0..5 {
            want += b.beta[j].max(0.0) * out.weights[(j, k)];
        }
        assert!((z[(0, k)] - want).abs() < 1e-14);
        assert_eq!(z[(0, k)], z[(1, k)]);
    }
}

#[test]
fn forward_matches_reference_implementation() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let stack = random_stack(&mut r, 6, &[7, 5], 4);
        let x = random_batch(&mut r, 9, 6);
        for mode in [NormMode::BatchStats, NormMode::RunningStats] {
            let z = logits(&stack, &x, mode).unwrap();
            let want = reference_forward(&stack, &to_rows(&x), mode);
            for (row, wrow) in z.iter_rows().zip(&want) {
                for (a, b) in row.iter().zip(wrow) {
                    assert!(rel_close(*a, *b, 1e-12, 1e-14), "seed {seed} {mode:?}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn softmax_rows_sum_to_one_and_entropy_bounded() {
    let mut r = rng(3);
    for _ in 0..200 {
        let c = r.gen_range(2..12);
        let scale = r.gen_range(0.1..200.0);
        let z = Matrix::from_vec(4, c, (0..4 * c).map(|_| r.gen_range(-1.0..1.0) * scale).collect()).unwrap();
        let (p, h) = softmax_entropy(&z);
        for (row, &hi) in p.iter_rows().zip(&h) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(hi >= 0.0 && hi <= (c as f64).ln());
        }
    }
}

#[test]
fn finite_difference_gradient_oracle() {
    let mut r = rng(4);
    let mut configs = 0;
    for batch in [2, 8] {
        for _ in 0..30 {
            let (stack, x, coeffs) = random_grad_config(&mut r, batch);
            let check = finite_difference_check(&stack, &x, &coeffs, 1e-4, 1e-4, 1e-8);
            assert!(check.failures.is_empty(), "{:#?}", check.failures);
            configs += 1;
        }
    }
    assert!(configs >= 50);
}

#[test]
fn zero_coefficients_give_zero_gradient() {
    let mut r = rng(5);
    let stack = random_stack(&mut r, 3, &[4], 3);
    let x = random_batch(&mut r, 6, 3);
    let (_, cache) = forward(&stack, &x, NormMode::BatchStats).unwrap();
    assert!(backward_entropy_objective(&stack, &cache, &[0.0; 6]).unwrap().is_zero());
}

#[test]
fn opposite_coefficients_on_identical_inputs_cancel() {
    let mut r = rng(6);
    let stack = random_stack(&mut r, 3, &[4, 4], 3);
    let row: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
    let x = Matrix::from_rows(&[row.clone(), row]).unwrap();
    let (_, cache) = forward(&stack, &x, NormMode::BatchStats).unwrap();
    let g = backward_entropy_objective(&stack, &cache, &[1.0, -1.0]).unwrap();
    assert!(g.iter_values().all(|v| v == 0.0));
}

#[test]
fn running_stats_cache_is_rejected_by_entropy_backward() {
    let mut r = rng(7);
    let stack = random_stack(&mut r, 3, &[4], 3);
    let x = random_batch(&mut r, 4, 3);
    let (_, cache) = forward(&stack, &x, NormMode::RunningStats).unwrap();
    assert!(backward_entropy_objective(&stack, &cache, &[1.0; 4]).is_err());
    let other = random_stack(&mut r, 3, &[5], 3);
    let (_, cache) = forward(&stack, &x, NormMode::BatchStats).unwrap();
    assert!(backward_entropy_objective(&other, &cache, &[1.0; 4]).is_err());
}

#[test]
fn running_stats_forward_is_per_sample() {
    let mut r = rng(8);
    let stack = random_stack(&mut r, 5, &[6, 6], 4);
    let x = random_batch(&mut r, 12, 5);
    let z = logits(&stack, &x, NormMode::RunningStats).unwrap();
    let mut perm: Vec<usize> = (0..12).collect();
    perm.shuffle(&mut r);
    let zp = logits(&stack, &x.select_rows(&perm), NormMode::RunningStats).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(zp.row(i), z.row(p));
    }
    // independent of the rest of the batch
    for i in 0..12 {
        let single = logits(&stack, &x.select_rows(&[i]), NormMode::RunningStats).unwrap();
        assert_eq!(single.row(0), z.row(i));
    }
}

#[test]
fn batch_stats_forward_is_permutation_equivariant() {
    let mut r = rng(9);
    let stack = random_stack(&mut r, 5, &[6], 4);
    let x = random_batch(&mut r, 10, 5);
    let z = logits(&stack, &x, NormMode::BatchStats).unwrap();
    let mut perm: Vec<usize> = (0..10).collect();
    perm.shuffle(&mut r);
    let zp = logits(&stack, &x.select_rows(&perm), NormMode::BatchStats).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        for (a, b) in zp.row(i).iter().zip(z.row(p)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn optimizer_steps_touch_only_batch_norm_affine() {
    let mut r = rng(10);
    let theta0 = random_stack(&mut r, 4, &[6, 5], 3);
    let mut stack = theta0.clone();
    for kind in [OptimizerKind::Sgd, OptimizerKind::ADAM_DEFAULT] {
        let mut opt = Optimizer::new(kind, 0.01).unwrap();
        for _ in 0..25 {
            let x = random_batch(&mut r, 8, 4);
            let (_, cache) = forward(&stack, &x, NormMode::BatchStats).unwrap();
            let coeffs: Vec<f64> = (0..8).map(|_| r.gen_range(-2.0..2.0)).collect();
            let g = backward_entropy_objective(&stack, &cache, &coeffs).unwrap();
            opt.step_bn(&mut stack, &g).unwrap();
        }
    }
    assert!(stack.frozen_parts_equal(&theta0));
    assert_ne!(stack, theta0);
    for (a, b) in stack.layers().iter().zip(theta0.layers()) {
        if let (Layer::BatchNorm(a), Layer::BatchNorm(b)) = (a, b) {
            assert_eq!(a.running_mean, b.running_mean);
            assert_eq!(a.running_var, b.running_var);
        }
    }
}

#[test]
fn zero_gradient_step_leaves_stack_unchanged() {
    let mut r = rng(11);
    let mut stack = random_stack(&mut r, 4, &[6], 3);
    let before = stack.clone();
    let mut opt = Optimizer::new(OptimizerKind::ADAM_DEFAULT, 0.001).unwrap();
    opt.step_bn(&mut stack, &GradientSet::zeros_like(&before)).unwrap();
    assert_eq!(stack, before);
}

#[test]
fn checkpoint_reload_gives_identical_forward() {
    let mut r = rng(12);
    let data = ostta_core::nn::LabeledData {
        features: random_batch(&mut r, 64, 4),
        labels: (0..64).map(|i| i % 3).collect(),
    };
    let cfg = TrainConfig { epochs: 2, ..Default::default() };
    let model = train_source(&data, &ArchSpec::new(4, vec![8], 3), &cfg).unwrap();
    let mut buf = Vec::new();
    Checkpoint::new(&model, cfg.seed).unwrap().write_to(&mut buf).unwrap();
    let back: LayerStack<f64> = Checkpoint::read_from(buf.as_slice()).unwrap().stack().unwrap();
    for mode in [NormMode::BatchStats, NormMode::RunningStats] {
        assert_eq!(logits(&back, &data.features, mode).unwrap(), logits(&model, &data.features, mode).unwrap());
    }
}

#[test]
fn zero_epochs_returns_the_seeded_initialization() {
    let arch = ArchSpec::new(4, vec![8], 3);
    let data = ostta_core::nn::LabeledData { features: Matrix::zeros(4, 4), labels: vec![0, 1, 2, 0] };
    let cfg = TrainConfig { epochs: 0, seed: 7, ..Default::default() };
    let trained = train_source(&data, &arch, &cfg).unwrap();
    let init = LayerStack::<f64>::init(&arch, &mut derive_rng(7, Component::Init, 0)).unwrap();
    assert_eq!(trained, init);
}

#[test]
fn single_precision_stack_tracks_double_precision() {
    let mut r = rng(13);
    let stack = random_stack(&mut r, 5, &[6, 6], 4);
    let x = random_batch(&mut r, 8, 5);
    let z64 = logits(&stack, &x, NormMode::BatchStats).unwrap();
    let s32: ostta_core::Mlp32 = stack.cast();
    let z32 = logits(&s32, &x.cast::<f32>(), NormMode::BatchStats).unwrap();
    for (a, b) in z64.as_slice().iter().zip(z32.as_slice()) {
        assert!((a - f64::from(*b)).abs() < 1e-4 * a.abs().max(1.0));
    }
    let (_, cache) = forward(&s32, &x.cast::<f32>(), NormMode::BatchStats).unwrap();
    let g = backward_entropy_objective(&s32, &cache, &[1.0f32; 8]).unwrap();
    assert!(g.is_finite());
}
