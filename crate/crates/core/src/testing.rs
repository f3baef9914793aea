//! Verification utilities shared by the test suites: finite-difference
//! gradient checking against the autodiff engine, and a naive convolution
//! used as an independent oracle for the GEMM-lowered implementation.
//!
//! The gradient check compares every analytic gradient against a central
//! finite difference computed from two extra forward passes,
//! `(f(x+h) - f(x-h)) / 2h` with `h = 1e-5 * max(1, |x|)`, in f64. The
//! reported error is relative: `|a - fd| / max(1, |a| + |fd|)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{BnState, Graph, Mode, NodeId, Param, Scalar, Tensor};

/// One gradient-check scenario: a parameter set and a closure that builds
/// a scalar loss from those parameters. The closure must be deterministic
/// (it is invoked once for the analytic pass and twice per finite
/// difference), so any internal randomness must be freshly seeded per call.
pub struct GradCase {
    pub name: &'static str,
    pub mode: Mode,
    pub tol: f64,
    pub params: Vec<Param<f64>>,
    #[allow(clippy::type_complexity)]
    pub build: Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>,
}

/// Check one case; returns the maximum relative error over all probed
/// elements. `probe_limit` bounds the probes per tensor (all elements are
/// probed when the tensor is small enough).
pub fn check_case(case: &GradCase, probe_limit: usize, rng: &mut ChaCha8Rng) -> f64 {
    for p in &case.params {
        p.zero_grad();
    }
    let mut g = Graph::new(case.mode);
    let ids: Vec<NodeId> = case.params.iter().map(|p| g.param(p)).collect();
    let loss = (case.build)(&mut g, &ids).expect("gradient case must build");
    g.backward(loss).expect("backward must succeed");
    let analytic: Vec<Vec<f64>> = case
        .params
        .iter()
        .map(|p| p.borrow().grad().expect("param gradient populated").to_vec())
        .collect();

    let eval_loss = || {
        let mut g = Graph::new(case.mode);
        let ids: Vec<NodeId> = case.params.iter().map(|p| g.param(p)).collect();
        let loss = (case.build)(&mut g, &ids).expect("gradient case must build");
        g.value(loss).item().expect("loss must be scalar")
    };

    let mut max_err = 0.0f64;
    for (pi, p) in case.params.iter().enumerate() {
        let n = p.numel();
        let idxs: Vec<usize> = if n <= probe_limit {
            (0..n).collect()
        } else {
            rand::seq::index::sample(rng, n, probe_limit).into_vec()
        };
        for i in idxs {
            let x0 = p.borrow().data()[i];
            let h = 1e-5 * x0.abs().max(1.0);
            p.borrow_mut().data_mut()[i] = x0 + h;
            let fp = eval_loss();
            p.borrow_mut().data_mut()[i] = x0 - h;
            let fm = eval_loss();
            p.borrow_mut().data_mut()[i] = x0;
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[pi][i];
            let err = (a - fd).abs() / (a.abs() + fd.abs()).max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    max_err
}

fn rparam(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Param<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Param::new(Tensor::new(shape, data).expect("shape/data consistent"))
}

fn rtensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape/data consistent")
}

/// Per-operation gradient cases (tolerance 1e-4). Each case isolates one
/// op, usually wrapped in `tanh` or weighted by a constant so that the
/// loss depends nontrivially on every element.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(seed));
    let mut cases: Vec<GradCase> = Vec::new();
    let tol = 1e-4;

    {
        let params = vec![rparam(&mut r, &[3, 4], -1.0, 1.0), rparam(&mut r, &[4, 2], -1.0, 1.0)];
        cases.push(GradCase {
            name: "matmul",
            mode: Mode::Train,
            tol,
            params,
            build: Box::new(|g, ids| {
                let y = g.matmul(ids[0], ids[1])?;
                let y = g.tanh(y)?;
                g.sum_all(y)
            }),
        });
    }
    {
        let x = rtensor(&mut r, &[5, 3], -1.0, 1.0);
        let params = vec![rparam(&mut r, &[3, 4], -1.0, 1.0), rparam(&mut r, &[4], -0.5, 0.5)];
        cases.push(GradCase {
            name: "dense",
            mode: Mode::Train,
            tol,
            params,
            build: Box::new(move |g, ids| {
                let xn = g.input(x.clone());
                let y = g.dense(xn, ids[0], ids[1])?;
                let y = g.tanh(y)?;
                g.sum_all(y)
            }),
        });
    }
    {
        // x as a parameter too, to exercise the input gradient (col2im path).
        let params = vec![
            rparam(&mut r, &[2, 2, 6, 6], -1.0, 1.0),
            rparam(&mut r, &[3, 2, 5, 5], -0.3, 0.3),
            rparam(&mut r, &[3], -0.2, 0.2),
        ];
        cases.push(GradCase {
            name: "conv2d",
            mode: Mode::Train,
            tol,
            params,
            build: Box::new(|g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2])?;
                let y = g.tanh(y)?;
                g.sum_all(y)
            }),
        });
    }
    {
        // 3x3 kernel variant (pad 1).
        let params = vec![
            rparam(&mut r, &[1, 3, 4, 4], -1.0, 1.0),
            rparam(&mut r, &[2, 3, 3, 3], -0.4, 0.4),
            rparam(&mut r, &[2], -0.2, 0.2),
        ];
        cases.push(GradCase {
            name: "conv2d_k3",
            mode: Mode::Train,
            tol,
            params,
            build: Box::new(|g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2])?;
                let y = g.sigmoid(y)?;
                g.sum_all(y)
            }),
        });
    }
    {
        let params = vec![rparam(&mut r, &[2, 2, 6, 6], -1.0, 1.0)];
        cases.push(GradCase {
            name: "maxpool2",
            mode: Mode::Train,
            tol,
            params,
            build: Box::new(|g, ids| {
                let y = g.maxpool2(ids[0])?;
                let y = g.tanh(y)?;
                g.sum_all(y)
            }),
        });
    }
    {
        // Pre-activations pushed away from the kink at 0.
        let n = 28usize;
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let sign = if r.gen::<bool>() { 1.0 } else { -1.0 };
                sign * r.gen_range(0.3..1.5)
            })
            .collect();
        let params = vec![Param::new(Tensor::new(&[4, 7], data).unwrap())];
        let c = rtensor(&mut r, &[4, 7], -1.0, 1.0);
        cases.push(GradCase {
            name: "relu",
            mode: Mode::Train,
            tol,
            params,
            build: Box::new(move |g, ids| {
                let y = g.relu(ids[0])?;
                let cn = g.input(c.clone());
                let y = g.mul(y, cn)?;
                g.sum_all(y)
            }),
        });
    }
    {
        let params = vec![rparam(&mut r, &[3, 5], -2.0, 2.0)];
        cases.push(GradCase {
            name: "sigmoid",
            mode: Mode::Train,
            tol,
            params,
            build: Box::new(|g, ids| {
                let y = g.sigmoid(ids[0])?;
                let y = g.mul(y, y)?;
                g.sum_all(y)
            }),
        });
    }
    {
        let params = vec![rparam(&mut r, &[3, 5], -2.0, 2.0)];
        cases.push(GradCase {
            name: "tanh",
            mode: Mode::Train,
            tol,
            params,
            build: Box::new(|g, ids| {
                let y = g.tanh(ids[0])?;
                g.mean_all(y)
            }),
        });
    }
    {
        // Weighted by a constant: the unweighted sum of a softmax is
        // constant 1 per lane and would zero out every gradient.
        let params = vec![rparam(&mut r, &[3, 5], -1.5, 1.5)];
        let c = rtensor(&mut r, &[3, 5], -1.0, 1.0);
        cases.push(GradCase {
            name: "softmax_axis1",
            mode: Mode::Train,
            tol,
            params,
            build: Box::new(move |g, ids| {
                let y = g.softmax(ids[0], 1)?;
                let cn = g.input(c.clone());
                let y = g.mul(y, cn)?;
                g.sum_all(y)
            }),
        });
    }
    {
        let params = vec![rparam(&mut r, &[4, 3], -1.5, 1.5)];
        let c = rtensor(&mut r, &[4, 3], -1.0, 1.0);
        cases.push(GradCase {
            name: "softmax_axis0",
            mode: Mode::Train,
            tol,
            params,
            build: Box::new(move |g, ids| {
                let y = g.softmax(ids[0], 0)?;
                let cn = g.input(c.clone());
                let y = g.mul(y, cn)?;
                g.sum_all(y)
            }),
        });
    }
    {
        // Batch-norm in train mode: gradients flow through the batch moments.
        let params = vec![
            rparam(&mut r, &[6, 3], -1.0, 1.0),
            rparam(&mut r, &[3], 0.5, 1.5),
            rparam(&mut r, &[3], -0.5, 0.5),
        ];
        let c = rtensor(&mut r, &[6, 3], -1.0, 1.0);
        cases.push(GradCase {
            name: "batchnorm_train_dense",
            mode: Mode::Train,
            tol,
            params,
            build: Box::new(move |g, ids| {
                let mut state = BnState::new(3, 0.9, 1e-5);
                let y = g.batchnorm(ids[0], ids[1], ids[2], &mut state)?;
                let cn = g.input(c.clone());
                let y = g.mul(y, cn)?;
                g.sum_all(y)
            }),
        });
    }
    {
        let params = vec![
            rparam(&mut r, &[3, 2, 4, 4], -1.0, 1.0),
            rparam(&mut r, &[2], 0.5, 1.5),
            rparam(&mut r, &[2], -0.5, 0.5),
        ];
        let c = rtensor(&mut r, &[3, 2, 4, 4], -1.0, 1.0);
        cases.push(GradCase {
            name: "batchnorm_train_conv",
            mode: Mode::Train,
            tol,
            params,
            build: Box::new(move |g, ids| {
                let mut state = BnState::new(2, 0.9, 1e-5);
                let y = g.batchnorm(ids[0], ids[1], ids[2], &mut state)?;
                let cn = g.input(c.clone());
                let y = g.mul(y, cn)?;
                g.sum_all(y)
            }),
        });
    }
    {
        // Eval mode: running stats act as constants.
        let params = vec![
            rparam(&mut r, &[5, 2], -1.0, 1.0),
            rparam(&mut r, &[2], 0.5, 1.5),
            rparam(&mut r, &[2], -0.5, 0.5),
        ];
        cases.push(GradCase {
            name: "batchnorm_eval",
            mode: Mode::Eval,
            tol,
            params,
            build: Box::new(|g, ids| {
                let mut state = BnState::new(2, 0.9, 1e-5);
                state.running_mean = vec![0.3, -0.2];
                state.running_var = vec![1.7, 0.6];
                let y = g.batchnorm(ids[0], ids[1], ids[2], &mut state)?;
                let y = g.tanh(y)?;
                g.sum_all(y)
            }),
        });
    }
    {
        // Dropout with a mask regenerated identically on every invocation.
        let params = vec![rparam(&mut r, &[4, 6], -1.0, 1.0)];
        cases.push(GradCase {
            name: "dropout",
            mode: Mode::Train,
            tol,
            params,
            build: Box::new(|g, ids| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(999);
                let y = g.dropout(ids[0], 0.3, &mut mask_rng)?;
                let y = g.tanh(y)?;
                g.sum_all(y)
            }),
        });
    }
    {
        // Arithmetic cluster: (a+b)*(a-b) + affine, plus scalar scaling.
        let params = vec![
            rparam(&mut r, &[2, 3], -1.0, 1.0),
            rparam(&mut r, &[2, 3], -1.0, 1.0),
            rparam(&mut r, &[], 0.2, 1.2),
        ];
        cases.push(GradCase {
            name: "arith_scale",
            mode: Mode::Train,
            tol,
            params,
            build: Box::new(|g, ids| {
                let s = g.add(ids[0], ids[1])?;
                let d = g.sub(ids[0], ids[1])?;
                let prod = g.mul(s, d)?;
                let scaled = g.scale(ids[2], prod)?;
                let shifted = g.affine(scaled, 0.7, 0.1)?;
                g.mean_all(shifted)
            }),
        });
    }
    {
        // Structural ops: reshape -> concat -> slice -> pad.
        let params = vec![rparam(&mut r, &[2, 2, 3], -1.0, 1.0), rparam(&mut r, &[2, 4], -1.0, 1.0)];
        let c = rtensor(&mut r, &[2, 8], -1.0, 1.0);
        cases.push(GradCase {
            name: "reshape_concat_slice_pad",
            mode: Mode::Train,
            tol,
            params,
            build: Box::new(move |g, ids| {
                let flat = g.reshape(ids[0], &[2, 6])?;
                let cat = g.concat_cols(&[flat, ids[1]])?; // [2, 10]
                let sl = g.slice_cols(cat, 2, 5)?; // [2, 5]
                let padded = g.pad_cols(sl, 8)?; // [2, 8]
                let cn = g.input(c.clone());
                let y = g.mul(padded, cn)?;
                let y = g.tanh(y)?;
                g.sum_all(y)
            }),
        });
    }
    {
        let params = vec![rparam(&mut r, &[6, 5], -2.0, 2.0)];
        let labels: Vec<u32> = (0..6).map(|_| r.gen_range(0..5u32)).collect();
        cases.push(GradCase {
            name: "softmax_cross_entropy",
            mode: Mode::Train,
            tol,
            params,
            build: Box::new(move |g, ids| g.softmax_cross_entropy(ids[0], &labels)),
        });
    }
    {
        let params = vec![rparam(&mut r, &[4, 3], -2.0, 2.0)];
        let targets: Vec<f64> = (0..12).map(|_| if r.gen::<bool>() { 1.0 } else { 0.0 }).collect();
        cases.push(GradCase {
            name: "weighted_bce",
            mode: Mode::Train,
            tol,
            params,
            build: Box::new(move |g, ids| g.weighted_bce(ids[0], &targets)),
        });
    }
    {
        // Gated bimodal cell: z = sigmoid([h1 h2] Wz), out = z*tanh(h1 W1) + (1-z)*tanh(h2 W2).
        let params = vec![
            rparam(&mut r, &[3, 4], -1.0, 1.0), // h1
            rparam(&mut r, &[3, 4], -1.0, 1.0), // h2
            rparam(&mut r, &[4, 5], -0.5, 0.5), // W1
            rparam(&mut r, &[4, 5], -0.5, 0.5), // W2
            rparam(&mut r, &[8, 5], -0.5, 0.5), // Wz
        ];
        cases.push(GradCase {
            name: "gated_unit_composite",
            mode: Mode::Train,
            tol,
            params,
            build: Box::new(|g, ids| {
                let cat = g.concat_cols(&[ids[0], ids[1]])?;
                let z = g.matmul(cat, ids[4])?;
                let z = g.sigmoid(z)?;
                let t1 = g.matmul(ids[0], ids[2])?;
                let t1 = g.tanh(t1)?;
                let t2 = g.matmul(ids[1], ids[3])?;
                let t2 = g.tanh(t2)?;
                let a = g.mul(z, t1)?;
                let zc = g.affine(z, -1.0, 1.0)?; // 1 - z
                let b = g.mul(zc, t2)?;
                let y = g.add(a, b)?;
                g.sum_all(y)
            }),
        });
    }
    {
        // Weighted-sum fusion of three branches with scalar coefficients.
        let params = vec![
            rparam(&mut r, &[2, 4], -1.0, 1.0),
            rparam(&mut r, &[2, 4], -1.0, 1.0),
            rparam(&mut r, &[2, 4], -1.0, 1.0),
            rparam(&mut r, &[], -1.0, 1.0),
            rparam(&mut r, &[], -1.0, 1.0),
            rparam(&mut r, &[], -1.0, 1.0),
        ];
        cases.push(GradCase {
            name: "weighted_sum_fusion",
            mode: Mode::Train,
            tol,
            params,
            build: Box::new(|g, ids| {
                let a = g.scale(ids[3], ids[0])?;
                let b = g.scale(ids[4], ids[1])?;
                let c = g.scale(ids[5], ids[2])?;
                let ab = g.add(a, b)?;
                let abc = g.add(ab, c)?;
                let y = g.tanh(abc)?;
                g.sum_all(y)
            }),
        });
    }
    cases
}

/// End-to-end gradient cases (tolerance 1e-3): small but complete model
/// stacks exercising every op in composition.
pub fn e2e_cases(seed: u64) -> Vec<GradCase> {
    let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xcafe_f00d).wrapping_add(17));
    let mut cases: Vec<GradCase> = Vec::new();
    let tol = 1e-3;

    {
        // Miniature convolutional tower on 8x8 inputs:
        // conv(1->4) relu pool -> conv(4->6) bn relu pool -> flatten
        // -> dense(24->16) relu dropout -> dense(16->4) -> cross-entropy.
        let x = rtensor(&mut r, &[3, 1, 8, 8], 0.0, 1.0);
        let labels = vec![0u32, 2, 3];
        let params = vec![
            rparam(&mut r, &[4, 1, 5, 5], -0.3, 0.3),
            rparam(&mut r, &[4], -0.1, 0.1),
            rparam(&mut r, &[6, 4, 5, 5], -0.2, 0.2),
            rparam(&mut r, &[6], -0.1, 0.1),
            rparam(&mut r, &[6], 0.8, 1.2),  // bn gamma
            rparam(&mut r, &[6], -0.2, 0.2), // bn beta
            rparam(&mut r, &[24, 16], -0.3, 0.3),
            rparam(&mut r, &[16], -0.1, 0.1),
            rparam(&mut r, &[16, 4], -0.4, 0.4),
            rparam(&mut r, &[4], -0.1, 0.1),
        ];
        cases.push(GradCase {
            name: "e2e_conv_tower",
            mode: Mode::Train,
            tol,
            params,
            build: Box::new(move |g, ids| {
                let xn = g.input(x.clone());
                let h = g.conv2d(xn, ids[0], ids[1])?;
                let h = g.relu(h)?;
                let h = g.maxpool2(h)?; // [3,4,4,4]
                let h = g.conv2d(h, ids[2], ids[3])?;
                let mut state = BnState::new(6, 0.9, 1e-5);
                let h = g.batchnorm(h, ids[4], ids[5], &mut state)?;
                let h = g.relu(h)?;
                let h = g.maxpool2(h)?; // [3,6,2,2]
                let h = g.reshape(h, &[3, 24])?;
                let h = g.dense(h, ids[6], ids[7])?;
                let h = g.relu(h)?;
                let mut mask_rng = ChaCha8Rng::seed_from_u64(4242);
                let h = g.dropout(h, 0.25, &mut mask_rng)?;
                let z = g.dense(h, ids[8], ids[9])?;
                g.softmax_cross_entropy(z, &labels)
            }),
        });
    }
    {
        // Miniature two-modality central-fusion stack with a multitask
        // loss: dense towers, learned scalar fusion coefficients, and a
        // central tower fed by weighted sums at every level.
        let x1 = rtensor(&mut r, &[4, 6], -1.0, 1.0);
        let x2 = rtensor(&mut r, &[4, 6], -1.0, 1.0);
        let labels = vec![0u32, 1, 2, 1];
        let params = vec![
            rparam(&mut r, &[6, 5], -0.5, 0.5),  // 0: tower1 dense1
            rparam(&mut r, &[5], -0.1, 0.1),     // 1
            rparam(&mut r, &[5, 3], -0.5, 0.5),  // 2: tower1 pred
            rparam(&mut r, &[3], -0.1, 0.1),     // 3
            rparam(&mut r, &[6, 5], -0.5, 0.5),  // 4: tower2 dense1
            rparam(&mut r, &[5], -0.1, 0.1),     // 5
            rparam(&mut r, &[5, 3], -0.5, 0.5),  // 6: tower2 pred
            rparam(&mut r, &[3], -0.1, 0.1),     // 7
            rparam(&mut r, &[6, 5], -0.5, 0.5),  // 8: central cell 1
            rparam(&mut r, &[5], -0.1, 0.1),     // 9
            rparam(&mut r, &[5, 3], -0.5, 0.5),  // 10: central cell 2
            rparam(&mut r, &[3], -0.1, 0.1),     // 11
            rparam(&mut r, &[], 0.2, 0.8),       // 12: alpha level0 mod1
            rparam(&mut r, &[], 0.2, 0.8),       // 13: alpha level0 mod2
            rparam(&mut r, &[], 0.2, 0.8),       // 14: alpha level1 central
            rparam(&mut r, &[], 0.2, 0.8),       // 15: alpha level1 mod1
            rparam(&mut r, &[], 0.2, 0.8),       // 16: alpha level1 mod2
            rparam(&mut r, &[], 0.2, 0.8),       // 17: alpha level2 central
            rparam(&mut r, &[], 0.2, 0.8),       // 18: alpha level2 mod1
            rparam(&mut r, &[], 0.2, 0.8),       // 19: alpha level2 mod2
        ];
        cases.push(GradCase {
            name: "e2e_central_fusion_multitask",
            mode: Mode::Train,
            tol,
            params,
            build: Box::new(move |g, ids| {
                let x1n = g.input(x1.clone());
                let x2n = g.input(x2.clone());
                // Tower hiddens at each level.
                let h1a = g.dense(x1n, ids[0], ids[1])?;
                let h1a = g.relu(h1a)?;
                let z1 = g.dense(h1a, ids[2], ids[3])?;
                let h2a = g.dense(x2n, ids[4], ids[5])?;
                let h2a = g.relu(h2a)?;
                let z2 = g.dense(h2a, ids[6], ids[7])?;
                // Level 0: weighted sum of the inputs feeds central cell 1.
                let s1 = g.scale(ids[12], x1n)?;
                let s2 = g.scale(ids[13], x2n)?;
                let f0 = g.add(s1, s2)?;
                let c1 = g.dense(f0, ids[8], ids[9])?;
                let c1 = g.relu(c1)?;
                // Level 1: central + both tower hiddens.
                let sc = g.scale(ids[14], c1)?;
                let s1 = g.scale(ids[15], h1a)?;
                let s2 = g.scale(ids[16], h2a)?;
                let f1 = g.add(sc, s1)?;
                let f1 = g.add(f1, s2)?;
                let c2 = g.dense(f1, ids[10], ids[11])?;
                // Level 2: weighted sum over prediction logits.
                let sc = g.scale(ids[17], c2)?;
                let s1 = g.scale(ids[18], z1)?;
                let s2 = g.scale(ids[19], z2)?;
                let zc = g.add(sc, s1)?;
                let zc = g.add(zc, s2)?;
                // Multitask loss: central + both towers, unit weights.
                let lc = g.softmax_cross_entropy(zc, &labels)?;
                let l1 = g.softmax_cross_entropy(z1, &labels)?;
                let l2 = g.softmax_cross_entropy(z2, &labels)?;
                let l = g.add(lc, l1)?;
                g.add(l, l2)
            }),
        });
    }
    cases
}

/// Summary of a full finite-difference sweep across several seeds.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub seeds: usize,
    pub op_cases: usize,
    pub e2e_cases: usize,
    pub max_op_err: f64,
    pub max_e2e_err: f64,
    pub op_tol: f64,
    pub e2e_tol: f64,
    pub elapsed: std::time::Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_op_err < self.op_tol && self.max_e2e_err < self.e2e_tol
    }
}

/// Run the whole gradient-check suite over the given seeds.
pub fn run_gradient_suite(seeds: &[u64], probe_limit: usize) -> SuiteReport {
    let start = std::time::Instant::now();
    let mut probe_rng = ChaCha8Rng::seed_from_u64(0xfd);
    let (mut max_op, mut max_e2e) = (0.0f64, 0.0f64);
    let (mut n_op, mut n_e2e) = (0usize, 0usize);
    for &seed in seeds {
        for case in op_cases(seed) {
            let err = check_case(&case, probe_limit, &mut probe_rng);
            assert!(
                err < case.tol,
                "gradient check failed for {} (seed {seed}): rel err {err:.3e} >= {:.0e}",
                case.name,
                case.tol
            );
            max_op = max_op.max(err);
            n_op += 1;
        }
        for case in e2e_cases(seed) {
            let err = check_case(&case, probe_limit, &mut probe_rng);
            assert!(
                err < case.tol,
                "gradient check failed for {} (seed {seed}): rel err {err:.3e} >= {:.0e}",
                case.name,
                case.tol
            );
            max_e2e = max_e2e.max(err);
            n_e2e += 1;
        }
    }
    SuiteReport {
        seeds: seeds.len(),
        op_cases: n_op,
        e2e_cases: n_e2e,
        max_op_err: max_op,
        max_e2e_err: max_e2e,
        op_tol: 1e-4,
        e2e_tol: 1e-3,
        elapsed: start.elapsed(),
    }
}

/// Direct six-loop convolution (stride 1, zero pad `k/2`), used as an
/// independent oracle for the im2col + GEMM implementation.
pub fn conv2d_naive<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    wgt: &[T],
    f: usize,
    k: usize,
    bias: &[T],
) -> Vec<T> {
    let pad = (k / 2) as isize;
    let mut out = vec![T::zero(); n * f * h * w];
    for ni in 0..n {
        for fi in 0..f {
            for y in 0..h {
                for xo in 0..w {
                    let mut acc = bias[fi].as_f64();
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - pad;
                                let ix = xo as isize + kx as isize - pad;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                let wv = wgt[((fi * c + ci) * k + ky) * k + kx];
                                acc += xv.as_f64() * wv.as_f64();
                            }
                        }
                    }
                    out[((ni * f + fi) * h + y) * w + xo] = T::from_f64(acc);
                }
            }
        }
    }
    out
}

/// Brute-force F1 oracle: builds one explicit 2×2 confusion matrix per
/// class (class-major scan), then derives `(micro, macro, weighted,
/// samples)` F1 from the integer counts. Organized deliberately unlike the
/// production metric code so the two can cross-check each other.
pub fn f1_oracle(pred: &[bool], truth: &[bool], n: usize, k: usize) -> (f64, f64, f64, f64) {
    #[derive(Default, Clone, Copy)]
    struct Cell {
        tp: u64,
        fp: u64,
        fn_: u64,
        tn: u64,
    }
    let harmonic = |tp: u64, fp: u64, fn_: u64| -> f64 {
        if 2 * tp + fp + fn_ == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        }
    };
    let mut cells = vec![Cell::default(); k];
    for (c, cell) in cells.iter_mut().enumerate() {
        for i in 0..n {
            let (p, t) = (pred[i * k + c], truth[i * k + c]);
            if p && t {
                cell.tp += 1;
            } else if p {
                cell.fp += 1;
            } else if t {
                cell.fn_ += 1;
            } else {
                cell.tn += 1;
            }
        }
    }
    let total = cells.iter().fold(Cell::default(), |acc, c| Cell {
        tp: acc.tp + c.tp,
        fp: acc.fp + c.fp,
        fn_: acc.fn_ + c.fn_,
        tn: acc.tn + c.tn,
    });
    let micro = harmonic(total.tp, total.fp, total.fn_);
    let mut macro_sum = 0.0;
    let mut weighted_num = 0.0;
    let mut support_sum = 0u64;
    for cell in &cells {
        let f1 = harmonic(cell.tp, cell.fp, cell.fn_);
        macro_sum += f1;
        let support = cell.tp + cell.fn_;
        weighted_num += support as f64 * f1;
        support_sum += support;
    }
    let macro_ = macro_sum / k as f64;
    let weighted = if support_sum == 0 { 0.0 } else { weighted_num / support_sum as f64 };
    let mut samples_sum = 0.0;
    for i in 0..n {
        let mut row = Cell::default();
        for c in 0..k {
            let (p, t) = (pred[i * k + c], truth[i * k + c]);
            if p && t {
                row.tp += 1;
            } else if p {
                row.fp += 1;
            } else if t {
                row.fn_ += 1;
            }
        }
        samples_sum += harmonic(row.tp, row.fp, row.fn_);
    }
    (micro, macro_, weighted, samples_sum / n as f64)
}
