//! Model-level benchmarks: one full optimizer step (forward, loss,
//! backward, parameter update) of the desk-scale two-tower network under
//! central fusion and under score concatenation, batch 32.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fusionlab_bench::{desk_centralnet, desk_concat, random_labels, random_tensor};
use fusionlab_core::tensor::{AdamState, Graph, Mode};
use fusionlab_core::train::{weighted_sum_losses, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn train_step(model: &Model<f32>, c: &mut Criterion, name: &str) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = 32;
    let views: Vec<_> =
        (0..2).map(|_| random_tensor::<f32>(&mut rng, &[batch, 1, 28, 28])).collect();
    let labels = random_labels(&mut rng, batch, 10);
    let params: Vec<_> = model.named_params().into_iter().map(|(_, p)| p).collect();
    let mut adam = AdamState::new(&params, 1e-4);
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_with_input(BenchmarkId::from_parameter(name), &(), |bench, ()| {
        bench.iter(|| {
            for p in &params {
                p.zero_grad();
            }
            let mut g = Graph::new(Mode::Train);
            let inputs: Vec<_> = views.iter().map(|v| g.input(v.clone())).collect();
            let out = model.forward(&mut g, &inputs, &mut rng).expect("forward");
            let heads = model.supervised_heads(&out, &[1.0, 1.0]);
            let terms: Vec<_> = heads
                .into_iter()
                .map(|(logits, w)| {
                    (g.softmax_cross_entropy(logits, &labels).expect("loss"), w)
                })
                .collect();
            let loss = weighted_sum_losses(&mut g, &terms).expect("loss terms");
            g.backward(loss).expect("scalar loss");
            adam.step(&params).expect("update");
            black_box(g.value(loss).data()[0])
        })
    });
    group.finish();
}

fn bench_centralnet_step(c: &mut Criterion) {
    train_step(&desk_centralnet(0), c, "centralnet");
}

fn bench_concat_step(c: &mut Criterion) {
    train_step(&desk_concat(0), c, "concat");
}

criterion_group!(models, bench_centralnet_step, bench_concat_step);
criterion_main!(models);
