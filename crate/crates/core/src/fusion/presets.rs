//! Canonical tower stacks and the four benchmark network layouts.

use super::{
    Activation, FusionMode, LayerKind, LayerSpec, NetworkSpec, Projection, TowerSpec,
};
use crate::error::{Error, Result};

/// Two conv+pool stages, one wide dense layer, and a classifier — the
/// classic small-image stack (28x28 → 14x14x32 → 7x7x64 → 1024 → classes).
pub fn lenet5(n_classes: usize, dropout_p: f64) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(32),
        LayerSpec::conv(64),
        LayerSpec::dense(1024, dropout_p),
        LayerSpec::prediction(n_classes, false),
    ]
}

/// Six-layer CNN for 112x112 inputs; the first three convolutions are
/// private feature extraction, after which shapes line up with `lenet5`
/// from its 7x7x64 level (56x56x8 → 28x28x16 → 14x14x32 → 7x7x64 → 1024 →
/// classes).
pub fn cnn6(n_classes: usize, dropout_p: f64) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(8),
        LayerSpec::conv(16),
        LayerSpec::conv(32),
        LayerSpec::conv(64),
        LayerSpec::dense(1024, dropout_p),
        LayerSpec::prediction(n_classes, false),
    ]
}

/// Fully connected stack: one dense layer per width, then a classifier.
pub fn mlp(
    hidden: &[usize],
    n_classes: usize,
    dropout_p: f64,
    batchnorm: bool,
    multilabel: bool,
) -> Vec<LayerSpec> {
    let mut layers: Vec<LayerSpec> = hidden
        .iter()
        .map(|&w| LayerSpec {
            kind: LayerKind::Dense,
            width: w,
            activation: Activation::Relu,
            dropout_p,
            batchnorm,
        })
        .collect();
    layers.push(LayerSpec::prediction(n_classes, multilabel));
    layers
}

/// Named tower stacks for configuration files.
pub fn build_unimodal(name: &str, n_classes: usize, dropout_p: f64) -> Result<Vec<LayerSpec>> {
    match name {
        "lenet5" => Ok(lenet5(n_classes, dropout_p)),
        "cnn6" => Ok(cnn6(n_classes, dropout_p)),
        "mlp-montalbano" => Ok(mlp(&[128, 42], n_classes, dropout_p, true, false)),
        "mlp-imdb" => Ok(mlp(&[2048, 512], n_classes, dropout_p, true, true)),
        other => Err(Error::Config(format!(
            "unknown tower stack '{other}' (expected lenet5, cnn6, mlp-montalbano, \
             or mlp-imdb)"
        ))),
    }
}

/// Paired-view digits: two `lenet5` towers on 1x28x28 inputs, fused from
/// the images themselves (5 fused levels), 10 classes.
pub fn mmnist_network(dropout_p: f64, fusion_mode: FusionMode) -> NetworkSpec {
    let tower = TowerSpec {
        input_shape: vec![1, 28, 28],
        layers: lenet5(10, dropout_p),
        fusion_start: 0,
    };
    let towers = vec![tower.clone(), tower];
    let central = NetworkSpec::mirrored_central(&towers);
    NetworkSpec {
        towers,
        central,
        n_classes: 10,
        multilabel: false,
        fusion_mode,
        projection: Projection::ZeroPad,
    }
}

/// Written digits paired with spoken digits: a `lenet5` image tower and a
/// `cnn6` tower on 112x112 spectrogram-style inputs. The audio tower's
/// first three convolutions run privately; fusion starts where both towers
/// emit 7x7x64 and covers 3 levels (7x7x64, dense, predictions).
pub fn avmnist_network(dropout_p: f64, fusion_mode: FusionMode) -> NetworkSpec {
    let image = TowerSpec {
        input_shape: vec![1, 28, 28],
        layers: lenet5(10, dropout_p),
        fusion_start: 2,
    };
    let audio = TowerSpec {
        input_shape: vec![1, 112, 112],
        layers: cnn6(10, dropout_p),
        fusion_start: 4,
    };
    let central = image.layers[image.fusion_start..].to_vec();
    NetworkSpec {
        towers: vec![image, audio],
        central,
        n_classes: 10,
        multilabel: false,
        fusion_mode,
        projection: Projection::ZeroPad,
    }
}

/// Gesture classification on four 400-dimensional precomputed feature
/// streams: per-modality MLPs 400→128→42→21, fused from the features.
pub fn montalbano_network(dropout_p: f64, fusion_mode: FusionMode) -> NetworkSpec {
    let tower = TowerSpec {
        input_shape: vec![400],
        layers: mlp(&[128, 42], 21, dropout_p, true, false),
        fusion_start: 0,
    };
    let towers = vec![tower.clone(), tower.clone(), tower.clone(), tower];
    let central = NetworkSpec::mirrored_central(&towers);
    NetworkSpec {
        towers,
        central,
        n_classes: 21,
        multilabel: false,
        fusion_mode,
        projection: Projection::ZeroPad,
    }
}

/// Movie-genre tagging (multilabel, 23 genres) on precomputed image and
/// text features. Text features are zero-padded to the image width (4096)
/// before entering the towers, so both towers share one input width. The
/// first dense width is a knob: published descriptions disagree between
/// 2048 and 4096, so it defaults to 2048 but stays configurable.
pub fn mmimdb_network(
    first_dense_width: usize,
    dropout_p: f64,
    fusion_mode: FusionMode,
) -> NetworkSpec {
    let tower = TowerSpec {
        input_shape: vec![4096],
        layers: mlp(&[first_dense_width, 512], 23, dropout_p, true, true),
        fusion_start: 0,
    };
    let towers = vec![tower.clone(), tower];
    let central = NetworkSpec::mirrored_central(&towers);
    NetworkSpec {
        towers,
        central,
        n_classes: 23,
        multilabel: true,
        fusion_mode,
        projection: Projection::ZeroPad,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::CentralNet;
    use crate::tensor::{Graph, Mode, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn forward_shape(spec: NetworkSpec, batch: usize) -> Vec<usize> {
        let model: CentralNet<f32> = CentralNet::init(spec.clone(), 1).unwrap();
        let mut g = Graph::new(Mode::Eval);
        let inputs: Vec<_> = spec
            .towers
            .iter()
            .map(|t| {
                let mut shape = vec![batch];
                shape.extend(&t.input_shape);
                g.input(Tensor::filled(&shape, 0.1))
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model.forward(&mut g, &inputs, &mut rng).unwrap();
        g.value(out.central_logits).shape().to_vec()
    }

    #[test]
    fn paired_digit_network_validates_and_predicts_ten_classes() {
        let spec = mmnist_network(0.5, FusionMode::Rescaled);
        spec.validate().unwrap();
        assert_eq!(spec.fused_level_shapes().unwrap().len(), 5);
        assert_eq!(forward_shape(spec, 2), vec![2, 10]);
    }

    #[test]
    fn asymmetric_audio_visual_network_fuses_at_matching_depth() {
        let spec = avmnist_network(0.5, FusionMode::Rescaled);
        spec.validate().unwrap();
        let fused = spec.fused_level_shapes().unwrap();
        assert_eq!(fused.len(), 3);
        assert_eq!(fused[0], vec![64, 7, 7]);
        assert_eq!(fused[1], vec![1024]);
        assert_eq!(fused[2], vec![10]);
        assert_eq!(forward_shape(spec, 1), vec![1, 10]);
    }

    #[test]
    fn four_stream_gesture_network_predicts_21_classes() {
        let spec = montalbano_network(0.0, FusionMode::Rescaled);
        spec.validate().unwrap();
        assert_eq!(spec.towers.len(), 4);
        assert_eq!(forward_shape(spec, 3), vec![3, 21]);
    }

    #[test]
    fn multilabel_genre_network_predicts_23_logits() {
        let spec = mmimdb_network(2048, 0.0, FusionMode::Rescaled);
        spec.validate().unwrap();
        assert!(spec.multilabel);
        assert_eq!(forward_shape(spec, 2), vec![2, 23]);
        // The width knob propagates.
        let wide = mmimdb_network(4096, 0.0, FusionMode::Rescaled);
        assert_eq!(wide.towers[0].layers[0].width, 4096);
    }

    #[test]
    fn named_stacks_resolve_and_unknown_names_fail() {
        assert_eq!(build_unimodal("lenet5", 10, 0.5).unwrap().len(), 4);
        assert_eq!(build_unimodal("cnn6", 10, 0.5).unwrap().len(), 6);
        assert_eq!(build_unimodal("mlp-montalbano", 21, 0.0).unwrap().len(), 3);
        assert_eq!(build_unimodal("mlp-imdb", 23, 0.0).unwrap().len(), 3);
        assert!(build_unimodal("resnet", 10, 0.0).is_err());
    }
}
