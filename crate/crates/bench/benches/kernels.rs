//! Kernel-level benchmarks: the dense matrix product, the padded
//! convolution in both directions, and the symmetric eigensolver that
//! backs the principal-component fit.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fusionlab_bench::{random_spd, random_tensor};
use fusionlab_core::linalg::sym_eigen_desc;
use fusionlab_core::tensor::{Graph, Mode, Param};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `[256,784] x [784,128]` — the shape class a dense layer sees on a
/// mid-sized batch.
fn bench_gemm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random_tensor::<f32>(&mut rng, &[256, 784]);
    let b = random_tensor::<f32>(&mut rng, &[784, 128]);
    c.bench_function("gemm_256x784x128_f32", |bench| {
        bench.iter(|| {
            let mut g = Graph::new(Mode::Eval);
            let an = g.input(a.clone());
            let bn = g.input(b.clone());
            let out = g.matmul(an, bn).expect("shapes agree");
            black_box(g.value(out).data()[0])
        })
    });
}

/// The two convolution geometries of the written-digit tower, forward
/// only and forward+backward.
fn bench_conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases = [
        ("28x28_c1_f6", [32, 1, 28, 28], [6, 1, 5, 5]),
        ("14x14_c6_f16", [32, 6, 14, 14], [16, 6, 5, 5]),
    ];
    let mut group = c.benchmark_group("conv2d");
    for (name, xs, ws) in cases {
        let x = random_tensor::<f32>(&mut rng, &xs);
        let w = Param::new(random_tensor::<f32>(&mut rng, &ws));
        let b = Param::new(random_tensor::<f32>(&mut rng, &[ws[0]]));
        group.bench_with_input(BenchmarkId::new("forward", name), &(), |bench, ()| {
            bench.iter(|| {
                let mut g = Graph::new(Mode::Eval);
                let xn = g.input(x.clone());
                let wn = g.param(&w);
                let bn = g.param(&b);
                let out = g.conv2d(xn, wn, bn).expect("shapes agree");
                black_box(g.value(out).data()[0])
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", name), &(), |bench, ()| {
            bench.iter(|| {
                w.zero_grad();
                b.zero_grad();
                let mut g = Graph::new(Mode::Train);
                let xn = g.input(x.clone());
                let wn = g.param(&w);
                let bn = g.param(&b);
                let out = g.conv2d(xn, wn, bn).expect("shapes agree");
                let loss = g.mean_all(out).expect("reducible");
                g.backward(loss).expect("scalar loss");
                black_box(g.value(loss).data()[0])
            })
        });
    }
    group.finish();
}

/// Dense symmetric eigendecompositions at the sizes the component fit
/// meets (the full image fit works on a 784x784 second-moment matrix;
/// smaller sizes show how the cost scales).
fn bench_eigensolver(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("sym_eigen_desc");
    group.sample_size(10);
    for n in [64usize, 128, 256] {
        let a = random_spd(&mut rng, n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| {
                let (vals, _vecs) = sym_eigen_desc(&a, n).expect("symmetric input");
                black_box(vals[0])
            })
        });
    }
    group.finish();
}

criterion_group!(kernels, bench_gemm, bench_conv2d, bench_eigensolver);
criterion_main!(kernels);
