//! Shared fixtures for the criterion benches: deterministic random
//! tensors, labels, and the desk-scale two-tower network the model
//! benches step through.

use fusionlab_core::baselines::{BaselineMethod, BaselineSpec, BaselineModel};
use fusionlab_core::fusion::{presets, CentralNet, FusionMode};
use fusionlab_core::tensor::{Scalar, Tensor};
use fusionlab_core::train::Model;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Uniform values in `[-1, 1)` with a fixed shape.
pub fn random_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(rng.gen_range(-1.0..1.0))).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Class labels drawn uniformly from `0..n_classes`.
pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, n_classes: u32) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..n_classes)).collect()
}

/// A random symmetric positive semi-definite matrix (`BᵀB` for random `B`),
/// row-major `n × n`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let b: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += b[k * n + i] * b[k * n + j];
            }
            a[i * n + j] = s / n as f64;
        }
    }
    a
}

/// The two-tower written-digit network with dropout disabled, as a
/// central-fusion model.
pub fn desk_centralnet(seed: u64) -> Model<f32> {
    let spec = presets::mmnist_network(0.0, FusionMode::Plain);
    Model::Central(CentralNet::init(spec, seed).expect("valid preset"))
}

/// The same towers fused by score concatenation.
pub fn desk_concat(seed: u64) -> Model<f32> {
    let net = presets::mmnist_network(0.0, FusionMode::Plain);
    let spec = BaselineSpec {
        method: BaselineMethod::Concat,
        towers: net.towers,
        n_classes: net.n_classes,
        multilabel: net.multilabel,
    };
    Model::Baseline(BaselineModel::init(spec, seed).expect("valid preset"))
}
