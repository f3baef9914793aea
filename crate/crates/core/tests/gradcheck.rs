//! Finite-difference verification of every autodiff operation, plus
//! forward cross-checks against naive reference implementations.

use fusionlab_core::tensor::{Graph, Mode, Tensor};
use fusionlab_core::testing::{self, check_case, conv2d_naive, e2e_cases, op_cases};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every op case must pass at the per-op tolerance across many seeds.
#[test]
fn per_op_gradients_match_finite_differences() {
    let mut probe_rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..8u64 {
        for case in op_cases(seed) {
            let err = check_case(&case, 64, &mut probe_rng);
            assert!(
                err < case.tol,
                "{} (seed {seed}): rel err {err:.3e} >= {:.0e}",
                case.name,
                case.tol
            );
        }
    }
}

/// Full miniature models (conv tower, central-fusion multitask stack)
/// must pass at the end-to-end tolerance.
#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut probe_rng = ChaCha8Rng::seed_from_u64(13);
    for seed in 0..12u64 {
        for case in e2e_cases(seed) {
            let err = check_case(&case, 48, &mut probe_rng);
            assert!(
                err < case.tol,
                "{} (seed {seed}): rel err {err:.3e} >= {:.0e}",
                case.name,
                case.tol
            );
        }
    }
}

/// The packaged suite (as used by the acceptance checks) passes and
/// reports sane bookkeeping.
#[test]
fn packaged_suite_reports_pass() {
    let seeds: Vec<u64> = (100..105).collect();
    let report = testing::run_gradient_suite(&seeds, 32);
    assert!(report.passed());
    assert_eq!(report.seeds, 5);
    assert!(report.op_cases >= 5 * 19, "expected full roster, got {}", report.op_cases);
    assert!(report.e2e_cases == 10);
}

/// GEMM-lowered convolution agrees with the direct six-loop version.
#[test]
fn conv2d_forward_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(n, c, h, w, f, k) in &[(2usize, 1usize, 6usize, 6usize, 3usize, 5usize), (1, 3, 8, 7, 2, 5), (2, 2, 5, 5, 4, 3)] {
        let x: Vec<f64> = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wgt: Vec<f64> = (0..f * c * k * k).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let bias: Vec<f64> = (0..f).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let want = conv2d_naive(&x, n, c, h, w, &wgt, f, k, &bias);

        let mut g = Graph::<f64>::new(Mode::Eval);
        let xn = g.input(Tensor::new(&[n, c, h, w], x).unwrap());
        let wn = g.input(Tensor::new(&[f, c, k, k], wgt).unwrap());
        let bn = g.input(Tensor::new(&[f], bias).unwrap());
        let y = g.conv2d(xn, wn, bn).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "conv mismatch: {a} vs {b}");
        }
    }
}

/// Convolution preserves spatial size (28 -> 28), pooling halves it; the
/// canonical 28 -> 14 -> 7 image pyramid comes out of the op shapes.
#[test]
fn conv_pool_shape_pyramid() {
    let mut g = Graph::<f32>::new(Mode::Eval);
    let x = g.input(Tensor::zeros(&[1, 1, 28, 28]));
    let w1 = g.input(Tensor::zeros(&[32, 1, 5, 5]));
    let b1 = g.input(Tensor::zeros(&[32]));
    let c1 = g.conv2d(x, w1, b1).unwrap();
    assert_eq!(g.value(c1).shape(), &[1, 32, 28, 28]);
    let p1 = g.maxpool2(c1).unwrap();
    assert_eq!(g.value(p1).shape(), &[1, 32, 14, 14]);
    let w2 = g.input(Tensor::zeros(&[64, 32, 5, 5]));
    let b2 = g.input(Tensor::zeros(&[64]));
    let c2 = g.conv2d(p1, w2, b2).unwrap();
    let p2 = g.maxpool2(c2).unwrap();
    assert_eq!(g.value(p2).shape(), &[1, 64, 7, 7]);
}
