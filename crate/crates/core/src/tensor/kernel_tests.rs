//! Kernel forward oracles and backward-vs-finite-difference checks.

use crate::error::CoreError;
use crate::rng::Rng;
use crate::tensor::{grad_check, Tape, Tensor};

fn approx(a: f32, b: f32, tol: f32) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn softmax_symmetry() {
    let mut tape = Tape::new();
    let x = tape.constant(&[1, 2], vec![0.0, 0.0]).unwrap();
    let y = tape.softmax_rows(x).unwrap();
    assert_eq!(tape.value(y), &[0.5, 0.5]);
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let i2 = tape.leaf(&Tensor::eye(2)).unwrap();
    let a = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = tape.matmul(i2, a).unwrap();
    assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn cross_entropy_uniform_logits() {
    let mut tape = Tape::new();
    let logits = tape.constant(&[1, 4], vec![0.3; 4]).unwrap();
    let ce = tape.cross_entropy_rows(logits, &[2]).unwrap();
    assert!(approx(tape.value(ce)[0], (4.0f32).ln(), 1e-6));
}

#[test]
fn layer_norm_two_point_row() {
    let mut tape = Tape::new();
    let x = tape.constant(&[1, 2], vec![1.0, 3.0]).unwrap();
    let g = tape.constant(&[2], vec![1.0, 1.0]).unwrap();
    let b = tape.constant(&[2], vec![0.0, 0.0]).unwrap();
    let y = tape.layer_norm(x, g, b).unwrap();
    // mean 2, population variance 1: (1-2)/sqrt(1+1e-5), (3-2)/sqrt(1+1e-5)
    assert!(approx(tape.value(y)[0], -1.0, 1e-4));
    assert!(approx(tape.value(y)[1], 1.0, 1e-4));
}

#[test]
fn backward_of_sum_of_squares() {
    let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0])
        .unwrap()
        .with_grad();
    let mut tape = Tape::new();
    let xid = tape.leaf(&x).unwrap();
    let sq = tape.mul(xid, xid).unwrap();
    let mean = tape.mean_all(sq).unwrap();
    let loss = tape.scale(mean, 3.0).unwrap(); // sum = mean * numel
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(xid).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn saturated_cross_entropy_gradient_vanishes() {
    // logits hugely favoring the target: loss at its minimum, grad ~ 0
    let mut logits = Tensor::zeros(&[1, 4]).with_grad();
    logits.data_mut()[1] = 30.0;
    let mut tape = Tape::new();
    let lid = tape.leaf(&logits).unwrap();
    let ce = tape.cross_entropy_rows(lid, &[1]).unwrap();
    let loss = tape.mean_all(ce).unwrap();
    tape.backward(loss).unwrap();
    for g in tape.grad(lid).unwrap() {
        assert!(g.abs() < 1e-6, "saturated grad {g}");
    }
}

#[test]
fn shape_mismatch_names_kernel_and_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let err = tape.matmul(a, b).unwrap_err();
    match err {
        CoreError::ShapeMismatch { kernel, lhs, rhs } => {
            assert_eq!(kernel, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn non_finite_input_is_rejected() {
    let mut tape = Tape::new();
    let err = tape.constant(&[1], vec![f32::NAN]).unwrap_err();
    assert!(matches!(err, CoreError::NonFinite { .. }));
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::new();
    let a = tape.constant(&[2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(
        tape.backward(a),
        Err(CoreError::Contract(_))
    ));
}

#[test]
fn repeated_backward_is_bit_identical() {
    let x = Tensor::from_vec(&[2, 2], vec![0.4, -0.2, 0.7, 0.1])
        .unwrap()
        .with_grad();
    let mut tape = Tape::new();
    let xid = tape.leaf(&x).unwrap();
    let sm = tape.softmax_rows(xid).unwrap();
    let ce = tape.cross_entropy_rows(sm, &[0, 1]).unwrap();
    let loss = tape.mean_all(ce).unwrap();
    tape.backward(loss).unwrap();
    let g1 = tape.grad(xid).unwrap().to_vec();
    tape.backward(loss).unwrap();
    let g2 = tape.grad(xid).unwrap().to_vec();
    let bits = |g: &[f32]| g.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&g1), bits(&g2));
}

#[test]
fn backward_is_linear_in_the_loss() {
    // grad of (a*L1 + b*L2) == a*grad(L1) + b*grad(L2) within 1e-5
    let x = Tensor::from_vec(&[2, 2], vec![0.3, -0.5, 0.9, 0.2])
        .unwrap()
        .with_grad();
    let (a, b) = (0.7f32, -1.3f32);

    let run = |wa: f32, wb: f32| -> Vec<f32> {
        let mut tape = Tape::new();
        let xid = tape.leaf(&x).unwrap();
        let sq = tape.mul(xid, xid).unwrap();
        let l1 = tape.mean_all(sq).unwrap();
        let sm = tape.softmax_rows(xid).unwrap();
        let ce = tape.cross_entropy_rows(sm, &[0, 1]).unwrap();
        let l2 = tape.mean_all(ce).unwrap();
        let l1s = tape.scale(l1, wa).unwrap();
        let l2s = tape.scale(l2, wb).unwrap();
        let loss = tape.add(l1s, l2s).unwrap();
        tape.backward(loss).unwrap();
        tape.grad(xid).unwrap().to_vec()
    };

    let combined = run(a, b);
    let g1 = run(1.0, 0.0);
    let g2 = run(0.0, 1.0);
    for i in 0..combined.len() {
        let expect = a * g1[i] + b * g2[i];
        assert!(
            approx(combined[i], expect, 1e-5),
            "coord {i}: {} vs {expect}",
            combined[i]
        );
    }
}

use crate::tensor::checksuite::{composition_check, kernel_checks};

#[test]
fn every_kernel_matches_finite_differences() {
    // spot-check a few seeds here; the acceptance suite runs >= 100
    for seed in 0..10u64 {
        for mut check in kernel_checks(seed) {
            let mut rng = Rng::new(seed ^ 0xABCD);
            let err =
                grad_check(&mut check.program, &check.params, 1e-2, 6, &mut rng).unwrap();
            assert!(err < 1e-3, "seed {seed} kernel {}: error {err}", check.name);
        }
    }
}

#[test]
fn random_composition_matches_finite_differences() {
    for seed in 0..10u64 {
        let mut check = composition_check(seed);
        let mut rng = Rng::new(seed ^ 0x55AA);
        let err = grad_check(&mut check.program, &check.params, 1e-3, 4, &mut rng).unwrap();
        assert!(err < 1e-3, "seed {seed}: relative error {err}");
    }
}

#[cfg(test)]
mod properties {
    use crate::rng::Rng as XorRng;
    use crate::tensor::{Tape, Tensor};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_stochastic(rows in 1usize..5, cols in 1usize..7, seed in 0u64..1000) {
            let mut rng = XorRng::new(seed);
            let x = Tensor::uniform(&[rows, cols], 4.0, &mut rng);
            let mut tape = Tape::new();
            let xid = tape.leaf(&x).unwrap();
            let y = tape.softmax_rows(xid).unwrap();
            let v = tape.value(y);
            for r in 0..rows {
                let row = &v[r * cols..(r + 1) * cols];
                let sum: f32 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                for &p in row {
                    prop_assert!((0.0..=1.0).contains(&p));
                }
            }
        }
    }
}
