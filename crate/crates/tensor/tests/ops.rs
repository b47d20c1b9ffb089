use std::sync::Arc;

use coperc_tensor::gradcheck::{grad_check, GradCheckOptions};
use coperc_tensor::{BatchNormStats, NormMode, RowMap, Tape, Tensor, TensorError};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn opts() -> GradCheckOptions {
    GradCheckOptions::default()
}

#[test]
fn matmul_identity_and_small_products() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::eye(2));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(t(&[1, 2], &[1.0, 0.0]));
    let b = tape.constant(t(&[2, 1], &[0.0, 5.0]));
    let y = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1]);
    assert_eq!(tape.value(y).data(), &[0.0]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(TensorError::Shape(_))));
    let c = tape.constant(Tensor::zeros([2, 2, 3]));
    let d = tape.constant(Tensor::zeros([3, 3, 4]));
    assert!(matches!(tape.matmul(c, d), Err(TensorError::Shape(_))));
}

#[test]
fn matmul_gradcheck() {
    let mut r = rng(1);
    let a = Tensor::randn([3, 4], 1.0, &mut r);
    let b = Tensor::randn([4, 2], 1.0, &mut r);
    let rep = grad_check(|tp, v| tp.matmul(v[0], v[1]), &[a, b], opts()).unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

#[test]
fn batched_broadcast_matmul_gradcheck() {
    let mut r = rng(2);
    let a = Tensor::randn([2, 3, 2, 4], 1.0, &mut r);
    let b = Tensor::randn([3, 4, 5], 1.0, &mut r);
    let rep = grad_check(|tp, v| tp.matmul(v[0], v[1]), &[a, b.clone()], opts()).unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    let c = Tensor::randn([2, 1, 5, 4], 1.0, &mut r);
    let d = Tensor::randn([3, 6, 4], 1.0, &mut r);
    let rep = grad_check(|tp, v| tp.matmul_t(v[0], v[1]), &[c, d], opts()).unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

#[test]
fn matmul_t_equals_explicit_transpose() {
    let mut r = rng(3);
    let a = Tensor::randn([3, 4], 1.0, &mut r);
    let b = Tensor::randn([5, 4], 1.0, &mut r);
    let mut bt = vec![0.0; 20];
    for i in 0..5 {
        for j in 0..4 {
            bt[j * 5 + i] = b.data()[i * 4 + j];
        }
    }
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let vbt = tape.constant(t(&[4, 5], &bt));
    let y1 = tape.matmul_t(va, vb).unwrap();
    let y2 = tape.matmul(va, vbt).unwrap();
    assert!(tape.value(y1).max_abs_diff(tape.value(y2)) < 1e-14);
}

#[test]
fn masked_softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let (y, empty) = tape.masked_softmax(x, Arc::new(vec![true; 3])).unwrap();
    assert!(empty.is_empty());
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(t(&[3], &[5.0, -1e9, 5.0]));
    let (y, _) = tape.masked_softmax(x, Arc::new(vec![true, false, true])).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.0, 0.5]);
}

#[test]
fn masked_softmax_fully_masked_row_is_zero_and_flagged() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let (y, empty) = tape.masked_softmax(x, Arc::new(vec![true, true, false, false, false, false])).unwrap();
    assert_eq!(empty, vec![1]);
    assert_eq!(&tape.value(y).data()[3..], &[0.0, 0.0, 0.0]);
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().is_finite());
}

#[test]
fn masked_softmax_gradcheck_and_zero_masked_gradient() {
    let mut r = rng(4);
    let x = Tensor::randn([2, 4], 1.0, &mut r);
    let mask = Arc::new(vec![true, false, true, true, false, true, true, false]);
    let m2 = mask.clone();
    let rep = grad_check(move |tp, v| Ok::<_, TensorError>(tp.masked_softmax(v[0], m2.clone())?.0), &[x.clone()], opts()).unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");

    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let (y, _) = tape.masked_softmax(xv, mask.clone()).unwrap();
    let w = tape.constant(Tensor::randn([2, 4], 1.0, &mut r));
    let p = tape.mul(y, w).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap().get(xv).unwrap();
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            assert_eq!(g.data()[i], 0.0);
        }
    }
    let yv = tape.value(y).data();
    for row in 0..2 {
        let total: f64 = yv[row * 4..row * 4 + 4].iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 4], &[3.0; 8]));
    let g1 = tape.constant(Tensor::full([4], 1.0));
    let b0 = tape.constant(Tensor::zeros([4]));
    let y = tape.layer_norm(x, g1, b0, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|v| *v == 0.0));

    let mut r = rng(5);
    let x = tape.constant(Tensor::randn([3, 4], 1.0, &mut r));
    let g0 = tape.constant(Tensor::zeros([4]));
    let beta = tape.constant(t(&[4], &[0.5, -1.0, 2.0, 0.0]));
    let y = tape.layer_norm(x, g0, beta, 1e-5).unwrap();
    for row in tape.value(y).data().chunks(4) {
        assert_eq!(row, &[0.5, -1.0, 2.0, 0.0]);
    }

    let y = tape.layer_norm(x, g1, b0, 1e-5).unwrap();
    for row in tape.value(y).data().chunks(4) {
        let mean: f64 = row.iter().sum::<f64>() / 4.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn layer_norm_gradcheck() {
    let mut r = rng(6);
    let x = Tensor::randn([3, 5], 1.0, &mut r);
    let g = Tensor::randn([5], 1.0, &mut r);
    let b = Tensor::randn([5], 1.0, &mut r);
    let rep = grad_check(|tp, v| tp.layer_norm(v[0], v[1], v[2], 1e-5), &[x, g, b], opts()).unwrap();
    assert!(rep.max_rel_err < 1e-5, "{rep:?}");
}

#[test]
fn conv1x1_matches_matmul_over_pixels() {
    let mut r = rng(7);
    let x = Tensor::randn([4, 5, 3], 1.0, &mut r);
    let k = Tensor::randn([1, 1, 3, 2], 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(k.clone());
    let y = tape.conv2d(xv, kv, None).unwrap();
    let x2 = tape.constant(x.reshape([20, 3]).unwrap());
    let k2 = tape.constant(k.reshape([3, 2]).unwrap());
    let y2 = tape.matmul(x2, k2).unwrap();
    assert_eq!(tape.value(y).shape(), &[4, 5, 2]);
    assert!(tape.value(y).data().iter().zip(tape.value(y2).data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn conv3x3_identity_kernel_reproduces_input() {
    let mut r = rng(8);
    let x = Tensor::randn([5, 6, 2], 1.0, &mut r);
    let mut k = Tensor::zeros([3, 3, 2, 2]);
    for c in 0..2 {
        k.data_mut()[((1 * 3 + 1) * 2 + c) * 2 + c] = 1.0;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(k);
    let y = tape.conv2d(xv, kv, None).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv_gradcheck() {
    let mut r = rng(9);
    let x = Tensor::randn([5, 5, 2], 1.0, &mut r);
    let k = Tensor::randn([3, 3, 2, 3], 0.5, &mut r);
    let b = Tensor::randn([3], 0.5, &mut r);
    let rep = grad_check(|tp, v| tp.conv2d(v[0], v[1], Some(v[2])), &[x, k, b], opts()).unwrap();
    assert!(rep.max_rel_err < 1e-5, "{rep:?}");
    let xb = Tensor::randn([2, 3, 4, 2], 1.0, &mut r);
    let k1 = Tensor::randn([1, 1, 2, 3], 0.5, &mut r);
    let rep = grad_check(|tp, v| tp.conv2d(v[0], v[1], None), &[xb, k1], opts()).unwrap();
    assert!(rep.max_rel_err < 1e-5, "{rep:?}");
}

#[test]
fn conv_rejects_even_kernels() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([4, 4, 2]));
    let k = tape.constant(Tensor::zeros([2, 2, 2, 1]));
    assert!(tape.conv2d(x, k, None).is_err());
}

fn unit_stats(c: usize) -> BatchNormStats {
    BatchNormStats { mean: vec![0.0; c], var: vec![1.0; c] }
}

#[test]
fn batch_norm_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full([2, 3, 3, 1], 4.0));
    let g = tape.constant(Tensor::full([1], 2.0));
    let b = tape.constant(Tensor::full([1], 0.25));
    let (y, stats) = tape.batch_norm(x, g, b, &unit_stats(1), NormMode::Train, 0.1, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|v| *v == 0.25));
    let stats = stats.unwrap();
    assert!((stats.mean[0] - 0.4).abs() < 1e-15);
    assert!((stats.var[0] - 0.9).abs() < 1e-15);

    let mut r = rng(10);
    let xs = Tensor::randn([3, 3, 2], 1.0, &mut r);
    let x = tape.constant(xs.clone());
    let g = tape.constant(t(&[2], &[1.5, -0.5]));
    let b = tape.constant(t(&[2], &[0.1, 0.2]));
    let (y, none) = tape.batch_norm(x, g, b, &unit_stats(2), NormMode::Eval, 0.1, 1e-5).unwrap();
    assert!(none.is_none());
    for (i, v) in tape.value(y).data().iter().enumerate() {
        let c = i % 2;
        let expect = xs.data()[i] * [1.5, -0.5][c] + [0.1, 0.2][c];
        assert!((v - expect).abs() < 1e-4);
    }
}

#[test]
fn batch_norm_train_gradcheck() {
    let mut r = rng(11);
    let x = Tensor::randn([2, 3, 3, 2], 1.0, &mut r);
    let g = Tensor::randn([2], 1.0, &mut r);
    let b = Tensor::randn([2], 1.0, &mut r);
    let stats = unit_stats(2);
    let rep = grad_check(
        |tp, v| Ok::<_, TensorError>(tp.batch_norm(v[0], v[1], v[2], &stats, NormMode::Train, 0.1, 1e-5)?.0),
        &[x.clone(), g.clone(), b.clone()],
        opts(),
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    let rep = grad_check(
        |tp, v| Ok::<_, TensorError>(tp.batch_norm(v[0], v[1], v[2], &stats, NormMode::Eval, 0.1, 1e-5)?.0),
        &[x, g, b],
        opts(),
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-5, "{rep:?}");
}

#[test]
fn elementwise_examples_and_gradchecks() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[-1.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 2.0]);

    let mixed = t(&[6], &[-2.5, -0.7, -0.1, 0.3, 1.1, 3.0]);
    let rep = grad_check(|tp, v| tp.gelu(v[0]), &[mixed.clone()], opts()).unwrap();
    assert!(rep.max_rel_err < 1e-5, "{rep:?}");
    let rep = grad_check(|tp, v| tp.relu(v[0]), &[mixed.clone()], opts()).unwrap();
    assert!(rep.max_rel_err < 1e-7, "{rep:?}");
    let rep = grad_check(|tp, v| tp.sigmoid(v[0]), &[mixed], opts()).unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");

    let mut r = rng(12);
    let a = Tensor::randn([2, 3, 4], 1.0, &mut r);
    let b = Tensor::randn([3, 1], 1.0, &mut r);
    let bias = Tensor::randn([4], 1.0, &mut r);
    let rep = grad_check(
        |tp, v| {
            let s = tp.add(v[0], v[1])?;
            let m = tp.mul(s, v[2])?;
            let d = tp.sub(m, v[0])?;
            tp.scale(d, -0.7)
        },
        &[a, b, bias],
        opts(),
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-7, "{rep:?}");
}

#[test]
fn concat_and_row_map_gradcheck() {
    let mut r = rng(13);
    let a = Tensor::randn([2, 3], 1.0, &mut r);
    let b = Tensor::randn([4, 3], 1.0, &mut r);
    let mut map = RowMap::new(6);
    map.push_row(&[(0, 0.25), (5, 0.75)]);
    map.push_row(&[(3, 1.0)]);
    map.push_row(&[]);
    map.push_row(&[(1, 0.5), (1, 0.5), (2, -1.0)]);
    let map = Arc::new(map);
    let rep = grad_check(
        |tp, v| {
            let c = tp.concat(&[v[0], v[1]])?;
            tp.row_map(c, map.clone(), 3)
        },
        &[a, b],
        opts(),
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-7, "{rep:?}");
}

#[test]
fn heads_require_divisible_channels() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([4, 6]));
    assert!(matches!(tape.split_heads(x, 4), Err(TensorError::Config(_))));
}

#[test]
fn split_heads_layout() {
    let mut tape = Tape::new();
    let data: Vec<f64> = (0..12).map(f64::from).collect();
    let x = tape.constant(t(&[3, 4], &data));
    let y = tape.split_heads(x, 2).unwrap();
    assert_eq!(tape.shape(y), &[2, 3, 2]);
    assert_eq!(tape.value(y).data(), &[0.0, 1.0, 4.0, 5.0, 8.0, 9.0, 2.0, 3.0, 6.0, 7.0, 10.0, 11.0]);
    let rep = grad_check(
        |tp, v| {
            let s = tp.split_heads(v[0], 2)?;
            let w = tp.constant(Tensor::new([2, 3, 2], (0..12).map(|i| i as f64 * 0.1).collect())?);
            let m = tp.mul(s, w)?;
            tp.merge_heads(m)
        },
        &[Tensor::randn([2, 3, 4], 1.0, &mut rng(14))],
        opts(),
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-7, "{rep:?}");
}

proptest! {
    #[test]
    fn split_merge_roundtrip_is_bitwise(outer in 1usize..4, t_len in 1usize..6, heads in 1usize..5, d in 1usize..5, seed in 0u64..1000) {
        let x = Tensor::randn([outer, t_len, heads * d], 1.0, &mut rng(seed));
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let s = tape.split_heads(v, heads).unwrap();
        let m = tape.merge_heads(s).unwrap();
        prop_assert!(tape.value(m).bitwise_eq(&x));
    }

    #[test]
    fn masked_softmax_rows_normalize(row in 1usize..9, seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = Tensor::randn([3, row], 5.0, &mut r);
        let mask: Vec<bool> = (0..3 * row).map(|i| i % row == 0 || (i * 7 + seed as usize) % 3 != 0).collect();
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let (y, empty) = tape.masked_softmax(v, Arc::new(mask.clone())).unwrap();
        prop_assert!(empty.is_empty());
        for (r_i, chunk) in tape.value(y).data().chunks(row).enumerate() {
            let s: f64 = chunk.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for (j, v) in chunk.iter().enumerate() {
                if mask[r_i * row + j] { prop_assert!(*v > 0.0) } else { prop_assert_eq!(*v, 0.0) }
            }
        }
    }
}

#[test]
fn linear_layer_gradcheck_is_tight() {
    let mut r = rng(15);
    let x = Tensor::randn([4, 3], 1.0, &mut r);
    let w = Tensor::randn([3, 2], 1.0, &mut r);
    let b = Tensor::randn([2], 1.0, &mut r);
    let rep = grad_check(|tp, v| tp.linear(v[0], v[1], Some(v[2])), &[x, w, b], opts()).unwrap();
    assert!(rep.max_rel_err < 1e-7, "{rep:?}");
}

#[test]
fn gradcheck_catches_corrupted_backward() {
    let x = Tensor::randn([5], 1.0, &mut rng(16));
    let rep = grad_check(|tp, v| tp.scale_with_faulty_grad(v[0], 2.0), &[x], opts()).unwrap();
    assert!(rep.max_rel_err > 1e-2, "{rep:?}");
}

#[test]
fn smooth_l1_values() {
    let mut tape = Tape::new();
    let p = tape.constant(t(&[3], &[0.5, 9.0, 3.0]));
    let target = Arc::new(vec![0.0, 0.0, 0.0]);
    let l = tape.smooth_l1(p, target.clone(), Arc::new(vec![true, false, false])).unwrap();
    assert_eq!(tape.value(l).data(), &[0.125]);
    let l = tape.smooth_l1(p, target.clone(), Arc::new(vec![true, false, true])).unwrap();
    assert!((tape.value(l).data()[0] - (0.125 + 2.5) / 2.0).abs() < 1e-15);
    let l = tape.smooth_l1(p, target, Arc::new(vec![false; 3])).unwrap();
    assert_eq!(tape.value(l).data(), &[0.0]);
}

#[test]
fn focal_loss_values() {
    let mut tape = Tape::new();
    // p = 0.5, target 1, alpha 0.25, gamma 2: -0.25 * 0.25 * ln 0.5
    let x = tape.constant(t(&[1], &[0.0]));
    let l = tape.focal_loss(x, Arc::new(vec![1.0]), 0.25, 2.0, 1.0).unwrap();
    let expect = -0.25 * 0.25 * 0.5f64.ln();
    assert!((tape.value(l).data()[0] - expect).abs() < 1e-15);
    assert!((expect - 0.04332).abs() < 1e-5);

    let x = tape.constant(t(&[2], &[40.0, -40.0]));
    let l = tape.focal_loss(x, Arc::new(vec![1.0, 0.0]), 0.25, 2.0, 1.0).unwrap();
    assert!(tape.value(l).data()[0] < 1e-30);

    // gamma = 0, alpha = 0.5 is half the binary cross-entropy.
    let logits = [-2.0, -0.3, 0.4, 1.7];
    let targets = [1.0, 0.0, 1.0, 0.0];
    let x = tape.constant(t(&[4], &logits));
    let l = tape.focal_loss(x, Arc::new(targets.to_vec()), 0.5, 0.0, 4.0).unwrap();
    let ce: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&z, y)| {
            let p = 1.0 / (1.0 + (-z as f64).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / 4.0;
    assert!((tape.value(l).data()[0] - 0.5 * ce).abs() < 1e-12);
}

#[test]
fn loss_gradchecks() {
    let mut r = rng(17);
    let x = Tensor::randn([10], 2.0, &mut r);
    let targets = Arc::new((0..10).map(|i| (i % 3 == 0) as u8 as f64).collect::<Vec<_>>());
    let rep = grad_check(|tp, v| tp.focal_loss(v[0], targets.clone(), 0.25, 2.0, 10.0), &[x.clone()], opts()).unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    let target = Arc::new(vec![0.3; 10]);
    let mask = Arc::new((0..10).map(|i| i % 2 == 0).collect::<Vec<_>>());
    let rep = grad_check(|tp, v| tp.smooth_l1(v[0], target.clone(), mask.clone()), &[x], opts()).unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1], &[f64::MAX]));
    assert!(matches!(tape.scale(x, 10.0), Err(TensorError::NonFinite(_))));
}

#[test]
fn repeated_forward_backward_is_bitwise_identical() {
    let run = || {
        let mut r = rng(18);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn([6, 8], 1.0, &mut r));
        let w = tape.leaf(Tensor::randn([8, 8], 1.0, &mut r));
        let g = tape.leaf(Tensor::full([8], 1.0));
        let b = tape.leaf(Tensor::zeros([8]));
        let h = tape.linear(x, w, None).unwrap();
        let h = tape.layer_norm(h, g, b, 1e-5).unwrap();
        let h = tape.gelu(h).unwrap();
        let h = tape.reshape(h, [2, 3, 8]).unwrap();
        let s = tape.split_heads(h, 2).unwrap();
        let a = tape.matmul_t(s, s).unwrap();
        let (a, _) = tape.masked_softmax(a, Arc::new(vec![true; 36])).unwrap();
        let o = tape.matmul(a, s).unwrap();
        let l = tape.sum(o).unwrap();
        let grads = tape.backward(l).unwrap();
        (tape.value(l).clone(), grads.get(x).unwrap(), grads.get(w).unwrap())
    };
    let (l1, gx1, gw1) = run();
    let (l2, gx2, gw2) = run();
    assert!(l1.bitwise_eq(&l2) && gx1.bitwise_eq(&gx2) && gw1.bitwise_eq(&gw2));
}
