//! Multimodal fusion architectures.
//!
//! A model is a set of unimodal *towers* plus a *central* tower. At every
//! fused level the central tower consumes a learned weighted sum of the
//! previous central representation and each tower's hidden representation:
//!
//! ```text
//! fused_0     = sum_k alpha[0][k] * h[0][k]                  (no central term)
//! fused_(i+1) = alpha_c[i+1] * central_i + sum_k alpha[i+1][k] * h[i+1][k]
//! ```
//!
//! with an optional per-level rescaling factor multiplying the modality sum
//! (`Rescaled` mode). The deepest weighted sum combines the unimodal
//! prediction logits with the central prediction logits and is the model's
//! decision. All `alpha` values are unconstrained trainable scalars,
//! initialized so every fused tensor starts as the arithmetic mean of its
//! inputs.

pub mod presets;

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BnState, Graph, NodeId, Param, Scalar, Tensor};

/// Elementwise nonlinearity applied inside a layer. `Softmax` (and
/// `Sigmoid` on prediction layers) is *deferred*: prediction layers emit
/// logits and the loss / evaluation code applies the final normalization,
/// so fused sums always operate on pre-activation scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// 5x5 convolution (stride 1, zero padding 2) followed by 2x2 max-pool.
    ConvPool,
    /// Fully connected layer; flattens its input if needed.
    Dense,
    /// Final fully connected classifier head; must be the last layer.
    Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Output channels (ConvPool) or units (Dense / Prediction).
    pub width: usize,
    pub activation: Activation,
    pub dropout_p: f64,
    pub batchnorm: bool,
}

impl LayerSpec {
    pub fn conv(width: usize) -> Self {
        Self { kind: LayerKind::ConvPool, width, activation: Activation::Relu, dropout_p: 0.0, batchnorm: true }
    }

    pub fn dense(width: usize, dropout_p: f64) -> Self {
        Self { kind: LayerKind::Dense, width, activation: Activation::Relu, dropout_p, batchnorm: true }
    }

    pub fn prediction(n_classes: usize, multilabel: bool) -> Self {
        Self {
            kind: LayerKind::Prediction,
            width: n_classes,
            activation: if multilabel { Activation::Sigmoid } else { Activation::Softmax },
            dropout_p: 0.0,
            batchnorm: false,
        }
    }
}

/// One unimodal stack. `fusion_start` indexes into the tower's
/// representation sequence (0 = raw input, i = output of layer i) and marks
/// the first representation that participates in fusion; earlier layers are
/// private feature extraction (used when towers have asymmetric depths).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerSpec {
    /// Per-sample input shape, e.g. `[1, 28, 28]` or `[400]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub fusion_start: usize,
}

impl TowerSpec {
    /// Number of fused representations this tower contributes.
    pub fn fused_depth(&self) -> usize {
        self.layers.len() + 1 - self.fusion_start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    /// The plain weighted sum.
    Plain,
    /// Multiplies the modality sum by a trainable per-level factor
    /// (initialized to 1), which stabilizes training.
    Rescaled,
}

/// How same-level representations of different widths are aligned before
/// fusion (rank-1 features only; convolutional shapes must match exactly).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Projection {
    /// Pad narrower feature vectors with zeros up to the widest.
    ZeroPad,
    /// Learn a linear map from each narrower width to the widest.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub towers: Vec<TowerSpec>,
    /// Central-tower layers; one per fused level except the last (the final
    /// level is a weighted sum of prediction logits with no layer after it).
    pub central: Vec<LayerSpec>,
    pub n_classes: usize,
    pub multilabel: bool,
    pub fusion_mode: FusionMode,
    pub projection: Projection,
}

/// Shape produced by one layer from a per-sample input shape.
pub fn layer_output_shape(input: &[usize], spec: &LayerSpec) -> Result<Vec<usize>> {
    if spec.width == 0 {
        return Err(Error::Config("layer width must be positive".into()));
    }
    match spec.kind {
        LayerKind::ConvPool => {
            let [_, h, w] = *input else {
                return Err(Error::Shape(format!(
                    "conv layer needs a channels x height x width input, got {input:?}"
                )));
            };
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Shape(format!(
                    "max-pool needs even spatial extents, got {h}x{w}"
                )));
            }
            Ok(vec![spec.width, h / 2, w / 2])
        }
        LayerKind::Dense | LayerKind::Prediction => {
            if input.is_empty() {
                return Err(Error::Shape("dense layer input shape is empty".into()));
            }
            Ok(vec![spec.width])
        }
    }
}

impl NetworkSpec {
    /// Per-sample representation shapes of one tower: input plus every
    /// layer output, in order.
    pub fn tower_rep_shapes(tower: &TowerSpec) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![tower.input_shape.clone()];
        for layer in &tower.layers {
            let next = layer_output_shape(shapes.last().expect("non-empty"), layer)?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Per-sample shape of every fused level after width alignment.
    pub fn fused_level_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let depth = self.towers[0].fused_depth();
        let all: Vec<Vec<Vec<usize>>> = self
            .towers
            .iter()
            .map(Self::tower_rep_shapes)
            .collect::<Result<_>>()?;
        let mut fused = Vec::with_capacity(depth);
        for l in 0..depth {
            let shapes: Vec<&Vec<usize>> =
                all.iter().zip(&self.towers).map(|(s, t)| &s[t.fusion_start + l]).collect();
            if shapes.iter().all(|s| *s == shapes[0]) {
                fused.push(shapes[0].clone());
            } else if shapes.iter().all(|s| s.len() == 1) {
                let widest = shapes.iter().map(|s| s[0]).max().expect("non-empty");
                fused.push(vec![widest]);
            } else {
                return Err(Error::Shape(format!(
                    "fused level {l} mixes incompatible representation shapes {shapes:?}; \
                     only flat feature vectors can be width-aligned"
                )));
            }
        }
        Ok(fused)
    }

    pub fn validate(&self) -> Result<()> {
        if self.towers.len() < 2 {
            return Err(Error::Config(format!(
                "fusion needs at least 2 modalities, got {}",
                self.towers.len()
            )));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be positive".into()));
        }
        for (k, tower) in self.towers.iter().enumerate() {
            if tower.layers.is_empty() {
                return Err(Error::Config(format!("tower {k} has no layers")));
            }
            if tower.fusion_start > tower.layers.len() {
                return Err(Error::Config(format!(
                    "tower {k} fusion_start {} exceeds its {} layers",
                    tower.fusion_start,
                    tower.layers.len()
                )));
            }
            for (i, layer) in tower.layers.iter().enumerate() {
                if layer.width == 0 {
                    return Err(Error::Config(format!("tower {k} layer {i} has width 0")));
                }
                if !(0.0..1.0).contains(&layer.dropout_p) {
                    return Err(Error::Config(format!(
                        "tower {k} layer {i} dropout_p {} outside [0, 1)",
                        layer.dropout_p
                    )));
                }
                let is_last = i + 1 == tower.layers.len();
                if (layer.kind == LayerKind::Prediction) != is_last {
                    return Err(Error::Config(format!(
                        "tower {k}: exactly the last layer must be a prediction layer \
                         (layer {i} violates this)"
                    )));
                }
                if is_last && layer.width != self.n_classes {
                    return Err(Error::Config(format!(
                        "tower {k} prediction width {} != n_classes {}",
                        layer.width, self.n_classes
                    )));
                }
            }
            if tower.fused_depth() != self.towers[0].fused_depth() {
                return Err(Error::Config(format!(
                    "tower {k} contributes {} fused levels but tower 0 contributes {}",
                    tower.fused_depth(),
                    self.towers[0].fused_depth()
                )));
            }
        }
        let fused = self.fused_level_shapes()?;
        if self.central.len() + 1 != fused.len() {
            return Err(Error::Config(format!(
                "central tower has {} layers but there are {} fused levels \
                 (need exactly one layer per level except the last)",
                self.central.len(),
                fused.len()
            )));
        }
        // The central tower must map each fused level's shape to the next.
        for (l, layer) in self.central.iter().enumerate() {
            let out = layer_output_shape(&fused[l], layer)?;
            if out != fused[l + 1] {
                return Err(Error::Shape(format!(
                    "central layer {l} produces shape {out:?} but fused level {} has \
                     shape {:?}",
                    l + 1,
                    fused[l + 1]
                )));
            }
            if !(0.0..1.0).contains(&layer.dropout_p) {
                return Err(Error::Config(format!(
                    "central layer {l} dropout_p {} outside [0, 1)",
                    layer.dropout_p
                )));
            }
        }
        if let Some(last) = self.central.last() {
            if last.kind != LayerKind::Prediction {
                return Err(Error::Config(
                    "the deepest central layer must be a prediction layer".into(),
                ));
            }
        }
        Ok(())
    }

    /// Central stack mirroring tower 0's fused layer suffix — the standard
    /// construction when all towers share their fused architecture.
    pub fn mirrored_central(towers: &[TowerSpec]) -> Vec<LayerSpec> {
        let t = &towers[0];
        t.layers[t.fusion_start..].to_vec()
    }
}

/// Batch-normalization parameters plus running statistics for one layer.
pub struct BnBlock<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub state: RefCell<BnState>,
}

impl<T: Scalar> BnBlock<T> {
    fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::filled(&[channels], T::from_f64(1.0))),
            beta: Param::new(Tensor::zeros(&[channels])),
            state: RefCell::new(BnState::new(channels, 0.9, 1e-5)),
        }
    }
}

/// Trainable state of one layer.
pub struct LayerBlock<T: Scalar> {
    pub spec: LayerSpec,
    pub w: Param<T>,
    pub b: Param<T>,
    pub bn: Option<BnBlock<T>>,
}

pub(crate) fn he_uniform<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product())
        .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(shape, data).expect("sized to shape")
}

fn apply_activation<T: Scalar>(g: &mut Graph<T>, x: NodeId, act: Activation) -> Result<NodeId> {
    match act {
        Activation::Relu => g.relu(x),
        Activation::Sigmoid => g.sigmoid(x),
        Activation::Tanh => g.tanh(x),
        // Deferred: losses and evaluation normalize logits themselves.
        Activation::Softmax | Activation::None => Ok(x),
    }
}

/// Reshape a rank-4 representation to `[n, c*h*w]`; rank-2 passes through.
pub(crate) fn flatten<T: Scalar>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() == 2 {
        return Ok(x);
    }
    let n = shape[0];
    let d: usize = shape[1..].iter().product();
    g.reshape(x, &[n, d])
}

impl<T: Scalar> LayerBlock<T> {
    /// Initialize the layer for a given per-sample input shape. Weights use
    /// He-uniform initialization (the only randomness consumed), biases are
    /// zero, batch-norm starts at identity. Returns the per-sample output
    /// shape.
    pub fn init(
        spec: &LayerSpec,
        in_shape: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Self, Vec<usize>)> {
        let out_shape = layer_output_shape(in_shape, spec)?;
        let (w, bn_channels) = match spec.kind {
            LayerKind::ConvPool => {
                let c = in_shape[0];
                let fan_in = c * 25;
                (he_uniform(&[spec.width, c, 5, 5], fan_in, rng), spec.width)
            }
            LayerKind::Dense | LayerKind::Prediction => {
                let d: usize = in_shape.iter().product();
                (he_uniform(&[d, spec.width], d, rng), spec.width)
            }
        };
        let b = Param::new(Tensor::zeros(&[spec.width]));
        let bn = spec.batchnorm.then(|| BnBlock::new(bn_channels));
        Ok((Self { spec: spec.clone(), w: Param::new(w), b, bn }, out_shape))
    }

    /// Layer order: conv/dense → batch-norm → activation → pool (conv only)
    /// → dropout (dense only). The returned node is the representation as
    /// the next layer consumes it, which is also what fusion taps.
    pub fn forward(&self, g: &mut Graph<T>, x: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        match self.spec.kind {
            LayerKind::ConvPool => {
                let mut z = g.conv2d(x, w, b)?;
                if let Some(bn) = &self.bn {
                    let gamma = g.param(&bn.gamma);
                    let beta = g.param(&bn.beta);
                    z = g.batchnorm(z, gamma, beta, &mut bn.state.borrow_mut())?;
                }
                z = apply_activation(g, z, self.spec.activation)?;
                g.maxpool2(z)
            }
            LayerKind::Dense | LayerKind::Prediction => {
                let x2 = flatten(g, x)?;
                let mut z = g.dense(x2, w, b)?;
                if let Some(bn) = &self.bn {
                    let gamma = g.param(&bn.gamma);
                    let beta = g.param(&bn.beta);
                    z = g.batchnorm(z, gamma, beta, &mut bn.state.borrow_mut())?;
                }
                z = apply_activation(g, z, self.spec.activation)?;
                if self.spec.dropout_p > 0.0 {
                    z = g.dropout(z, self.spec.dropout_p, rng)?;
                }
                Ok(z)
            }
        }
    }

    pub fn push_named_params(&self, prefix: &str, out: &mut Vec<(String, Param<T>)>) {
        out.push((format!("{prefix}.weight"), self.w.clone()));
        out.push((format!("{prefix}.bias"), self.b.clone()));
        if let Some(bn) = &self.bn {
            out.push((format!("{prefix}.bn_gamma"), bn.gamma.clone()));
            out.push((format!("{prefix}.bn_beta"), bn.beta.clone()));
        }
    }
}

/// One unimodal tower: its spec plus initialized layers.
pub struct Tower<T: Scalar> {
    pub spec: TowerSpec,
    pub blocks: Vec<LayerBlock<T>>,
}

impl<T: Scalar> Tower<T> {
    pub fn init(spec: &TowerSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut blocks = Vec::with_capacity(spec.layers.len());
        let mut shape = spec.input_shape.clone();
        for layer in &spec.layers {
            let (block, out) = LayerBlock::init(layer, &shape, rng)?;
            blocks.push(block);
            shape = out;
        }
        Ok(Self { spec: spec.clone(), blocks })
    }

    /// Run the tower, returning every representation: `[input, out_1, ...,
    /// out_L]`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        input: NodeId,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<NodeId>> {
        let got = g.value(input).shape()[1..].to_vec();
        if got != self.spec.input_shape {
            return Err(Error::Shape(format!(
                "tower expects per-sample input shape {:?}, got {:?}",
                self.spec.input_shape, got
            )));
        }
        let mut reps = Vec::with_capacity(self.blocks.len() + 1);
        reps.push(input);
        let mut cur = input;
        for block in &self.blocks {
            cur = block.forward(g, cur, rng)?;
            reps.push(cur);
        }
        Ok(reps)
    }

    pub fn push_named_params(&self, prefix: &str, out: &mut Vec<(String, Param<T>)>) {
        for (i, block) in self.blocks.iter().enumerate() {
            block.push_named_params(&format!("{prefix}.layer{i}"), out);
        }
    }
}

/// Trainable fusion scalars for one level.
pub struct FusionLevel<T: Scalar> {
    /// Weight on the previous central representation; absent at level 0.
    pub central: Option<Param<T>>,
    /// One weight per modality.
    pub modalities: Vec<Param<T>>,
    /// Rescaling factor on the modality sum (`Rescaled` mode only).
    pub rescale: Option<Param<T>>,
}

pub struct FusionParams<T: Scalar> {
    pub levels: Vec<FusionLevel<T>>,
}

/// Every weight at a level starts at 1/(number of summed terms), so the
/// initial fused tensor is the arithmetic mean of its inputs; rescaling
/// factors start at 1.
pub fn init_fusion_params<T: Scalar>(
    n_modalities: usize,
    n_levels: usize,
    mode: FusionMode,
) -> FusionParams<T> {
    let levels = (0..n_levels)
        .map(|l| {
            let n_terms = if l == 0 { n_modalities } else { n_modalities + 1 };
            let init = T::from_f64(1.0 / n_terms as f64);
            let scalar = || Param::new(Tensor::scalar(init));
            FusionLevel {
                central: (l > 0).then(scalar),
                modalities: (0..n_modalities).map(|_| scalar()).collect(),
                rescale: (mode == FusionMode::Rescaled)
                    .then(|| Param::new(Tensor::scalar(T::from_f64(1.0)))),
            }
        })
        .collect();
    FusionParams { levels }
}

/// The weighted sum at one level. Term order is fixed (central term first,
/// then modalities left to right) so results are bit-reproducible.
pub fn fuse_level<T: Scalar>(
    g: &mut Graph<T>,
    central_prev: Option<NodeId>,
    hiddens: &[NodeId],
    level: &FusionLevel<T>,
    mode: FusionMode,
) -> Result<NodeId> {
    if hiddens.len() != level.modalities.len() {
        return Err(Error::Shape(format!(
            "level has {} modality weights but {} hidden representations",
            level.modalities.len(),
            hiddens.len()
        )));
    }
    if central_prev.is_some() != level.central.is_some() {
        return Err(Error::Invariant(
            "central representation and central weight must both be present or both \
             absent"
                .into(),
        ));
    }
    let mut modality_sum: Option<NodeId> = None;
    for (h, alpha) in hiddens.iter().zip(&level.modalities) {
        let a = g.param(alpha);
        let term = g.scale(a, *h)?;
        modality_sum = Some(match modality_sum {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let mut modality_sum = modality_sum
        .ok_or_else(|| Error::Invariant("fused level needs at least one modality".into()))?;
    if mode == FusionMode::Rescaled {
        let rescale = level.rescale.as_ref().ok_or_else(|| {
            Error::Invariant("rescaled fusion requires a rescale parameter".into())
        })?;
        let r = g.param(rescale);
        modality_sum = g.scale(r, modality_sum)?;
    }
    match (central_prev, &level.central) {
        (Some(c), Some(alpha_c)) => {
            let a = g.param(alpha_c);
            let central_term = g.scale(a, c)?;
            g.add(central_term, modality_sum)
        }
        _ => Ok(modality_sum),
    }
}

/// Everything a model's forward pass exposes.
pub struct ModelOutputs {
    /// The deepest fused logits — the model's decision head.
    pub central_logits: NodeId,
    /// Per-modality prediction logits (empty for models without unimodal
    /// heads).
    pub modality_logits: Vec<NodeId>,
    /// Every fused level's pre-activation tensor, for inspection.
    pub fused_levels: Vec<NodeId>,
    /// Node to use for predictions.
    pub decision: NodeId,
    /// True when `decision` holds probabilities rather than logits
    /// (ensemble-style models average post-softmax outputs).
    pub decision_is_probs: bool,
}

/// Normalized view of one level's fusion weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaLevelReport {
    pub level: usize,
    /// Percentage on the central representation; absent at level 0.
    pub central_pct: Option<f64>,
    /// Percentage per modality.
    pub modality_pct: Vec<f64>,
    /// True when every weight at the level is (numerically) zero; the
    /// percentages are then reported uniform.
    pub degenerate: bool,
}

/// The full fusion model.
pub struct CentralNet<T: Scalar> {
    pub spec: NetworkSpec,
    pub towers: Vec<Tower<T>>,
    pub central: Vec<LayerBlock<T>>,
    pub fusion: FusionParams<T>,
    /// `projections[k][l]`: optional learned width-alignment map for tower
    /// k's level-l representation (`Projection::Linear` only).
    pub projections: Vec<Vec<Option<Param<T>>>>,
}

impl<T: Scalar> CentralNet<T> {
    /// Deterministic construction: towers in index order, then central
    /// layers, then projections; only weight matrices consume randomness.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let towers: Vec<Tower<T>> = spec
            .towers
            .iter()
            .map(|t| Tower::init(t, &mut rng))
            .collect::<Result<_>>()?;

        let fused_shapes = spec.fused_level_shapes()?;
        let mut central = Vec::with_capacity(spec.central.len());
        let mut shape = fused_shapes[0].clone();
        for layer in &spec.central {
            let (block, out) = LayerBlock::init(layer, &shape, &mut rng)?;
            central.push(block);
            shape = out;
        }

        let mut projections = Vec::with_capacity(spec.towers.len());
        for (k, tower) in spec.towers.iter().enumerate() {
            let reps = NetworkSpec::tower_rep_shapes(tower)?;
            let mut per_level = Vec::with_capacity(fused_shapes.len());
            for (l, fused) in fused_shapes.iter().enumerate() {
                let own = &reps[tower.fusion_start + l];
                let needs = own != fused;
                if needs && spec.projection == Projection::Linear {
                    if own.len() != 1 || fused.len() != 1 {
                        return Err(Error::Shape(format!(
                            "tower {k} level {l}: only flat feature vectors can be \
                             projected ({own:?} vs {fused:?})"
                        )));
                    }
                    per_level.push(Some(Param::new(he_uniform(
                        &[own[0], fused[0]],
                        own[0],
                        &mut rng,
                    ))));
                } else {
                    per_level.push(None);
                }
            }
            projections.push(per_level);
        }

        let fusion = init_fusion_params(spec.towers.len(), fused_shapes.len(), spec.fusion_mode);
        Ok(Self { spec, towers, central, fusion, projections })
    }

    pub fn n_fused_levels(&self) -> usize {
        self.fusion.levels.len()
    }

    /// Align tower k's level-l representation to the fused width.
    fn align(
        &self,
        g: &mut Graph<T>,
        k: usize,
        l: usize,
        h: NodeId,
        fused_width: Option<usize>,
    ) -> Result<NodeId> {
        match (&self.projections[k][l], fused_width) {
            (Some(p), _) => {
                let w = g.param(p);
                g.matmul(h, w)
            }
            (None, Some(target)) if g.value(h).shape().len() == 2 => g.pad_cols(h, target),
            _ => Ok(h),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        inputs: &[NodeId],
        rng: &mut ChaCha8Rng,
    ) -> Result<ModelOutputs> {
        if inputs.len() != self.towers.len() {
            return Err(Error::Input(format!(
                "model has {} towers but got {} inputs",
                self.towers.len(),
                inputs.len()
            )));
        }
        let mut tower_reps = Vec::with_capacity(self.towers.len());
        for (tower, &input) in self.towers.iter().zip(inputs) {
            tower_reps.push(tower.forward(g, input, rng)?);
        }
        let fused_shapes = self.spec.fused_level_shapes()?;
        let n_levels = fused_shapes.len();

        let mut fused_levels = Vec::with_capacity(n_levels);
        let mut central_prev: Option<NodeId> = None;
        for l in 0..n_levels {
            let target_width =
                (fused_shapes[l].len() == 1).then(|| fused_shapes[l][0]);
            let mut hs = Vec::with_capacity(self.towers.len());
            for (k, reps) in tower_reps.iter().enumerate() {
                let tap = reps[self.spec.towers[k].fusion_start + l];
                // Rank-4 taps fused with a rank-2 central representation
                // cannot happen (validate guarantees shape agreement), but a
                // rank-4 tap entering a flat fused level must be flattened.
                let tap = if target_width.is_some() { flatten(g, tap)? } else { tap };
                hs.push(self.align(g, k, l, tap, target_width)?);
            }
            let fused =
                fuse_level(g, central_prev, &hs, &self.fusion.levels[l], self.spec.fusion_mode)?;
            fused_levels.push(fused);
            if l + 1 < n_levels {
                central_prev = Some(self.central[l].forward(g, fused, rng)?);
            }
        }

        let modality_logits: Vec<NodeId> = tower_reps
            .iter()
            .zip(&self.spec.towers)
            .map(|(reps, t)| reps[t.fusion_start + n_levels - 1])
            .collect();
        let central_logits = *fused_levels.last().expect("at least one level");
        Ok(ModelOutputs {
            central_logits,
            modality_logits,
            fused_levels,
            decision: central_logits,
            decision_is_probs: false,
        })
    }

    /// All trainable parameters with stable names, in a deterministic
    /// order: towers, central layers, projections, fusion scalars.
    pub fn named_params(&self) -> Vec<(String, Param<T>)> {
        let mut out = Vec::new();
        for (k, tower) in self.towers.iter().enumerate() {
            tower.push_named_params(&format!("tower{k}"), &mut out);
        }
        for (l, block) in self.central.iter().enumerate() {
            block.push_named_params(&format!("central.layer{l}"), &mut out);
        }
        for (k, per_level) in self.projections.iter().enumerate() {
            for (l, p) in per_level.iter().enumerate() {
                if let Some(p) = p {
                    out.push((format!("tower{k}.proj.level{l}.weight"), p.clone()));
                }
            }
        }
        for (l, level) in self.fusion.levels.iter().enumerate() {
            if let Some(c) = &level.central {
                out.push((format!("fusion.level{l}.alpha_central"), c.clone()));
            }
            for (k, m) in level.modalities.iter().enumerate() {
                out.push((format!("fusion.level{l}.alpha_modality{k}"), m.clone()));
            }
            if let Some(r) = &level.rescale {
                out.push((format!("fusion.level{l}.alpha_rescale"), r.clone()));
            }
        }
        out
    }

    /// Batch-norm blocks (running statistics live here) with stable names.
    pub fn named_bn(&self) -> Vec<(String, &BnBlock<T>)> {
        let mut out = Vec::new();
        for (k, tower) in self.towers.iter().enumerate() {
            for (i, block) in tower.blocks.iter().enumerate() {
                if let Some(bn) = &block.bn {
                    out.push((format!("tower{k}.layer{i}.bn"), bn));
                }
            }
        }
        for (l, block) in self.central.iter().enumerate() {
            if let Some(bn) = &block.bn {
                out.push((format!("central.layer{l}.bn"), bn));
            }
        }
        out
    }

    /// Per-level fusion weights as percentages of total absolute weight.
    /// In rescaled mode the modality weights are multiplied through by the
    /// level's rescaling factor before normalization, so the report shows
    /// effective contributions. Scale-invariant per level.
    pub fn report_alphas(&self) -> Vec<AlphaLevelReport> {
        let scalar = |p: &Param<T>| p.borrow().data()[0].as_f64();
        self.fusion
            .levels
            .iter()
            .enumerate()
            .map(|(l, level)| {
                let rescale = match (&level.rescale, self.spec.fusion_mode) {
                    (Some(r), FusionMode::Rescaled) => scalar(r).abs(),
                    _ => 1.0,
                };
                let central_w = level.central.as_ref().map(|c| scalar(c).abs());
                let modality_w: Vec<f64> =
                    level.modalities.iter().map(|m| scalar(m).abs() * rescale).collect();
                let total = central_w.unwrap_or(0.0) + modality_w.iter().sum::<f64>();
                let n_terms = modality_w.len() + usize::from(central_w.is_some());
                let degenerate = total <= f64::MIN_POSITIVE * n_terms as f64;
                if degenerate {
                    let uniform = 100.0 / n_terms as f64;
                    AlphaLevelReport {
                        level: l,
                        central_pct: central_w.map(|_| uniform),
                        modality_pct: vec![uniform; modality_w.len()],
                        degenerate: true,
                    }
                } else {
                    AlphaLevelReport {
                        level: l,
                        central_pct: central_w.map(|w| 100.0 * w / total),
                        modality_pct: modality_w.iter().map(|w| 100.0 * w / total).collect(),
                        degenerate: false,
                    }
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data = (0..shape.iter().product())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Two small MLP towers fused from the input, no dropout.
    fn tiny_mlp_spec(batchnorm: bool, mode: FusionMode) -> NetworkSpec {
        let mut layers =
            vec![LayerSpec::dense(8, 0.0), LayerSpec::dense(6, 0.0), LayerSpec::prediction(3, false)];
        for l in &mut layers {
            l.batchnorm = batchnorm && l.kind != LayerKind::Prediction;
        }
        let tower = TowerSpec { input_shape: vec![5], layers, fusion_start: 0 };
        let towers = vec![tower.clone(), tower];
        let central = NetworkSpec::mirrored_central(&towers);
        NetworkSpec {
            towers,
            central,
            n_classes: 3,
            multilabel: false,
            fusion_mode: mode,
            projection: Projection::ZeroPad,
        }
    }

    #[test]
    fn fuse_level_recovers_each_limit() {
        let mut g: Graph<f64> = Graph::new(Mode::Eval);
        let mut r = rng(1);
        let c = g.input(rand_tensor(&[2, 4], &mut r));
        let h1 = g.input(rand_tensor(&[2, 4], &mut r));
        let h2 = g.input(rand_tensor(&[2, 4], &mut r));

        // alpha_m = 0, alpha_c = 1: output is the central representation.
        let level = FusionLevel::<f64> {
            central: Some(Param::new(Tensor::scalar(1.0))),
            modalities: vec![
                Param::new(Tensor::scalar(0.0)),
                Param::new(Tensor::scalar(0.0)),
            ],
            rescale: None,
        };
        let out = fuse_level(&mut g, Some(c), &[h1, h2], &level, FusionMode::Plain).unwrap();
        assert_eq!(g.value(out).data(), g.value(c).data());

        // alpha_c = 0, alpha_m = 0.5 each: elementwise average.
        let level = FusionLevel::<f64> {
            central: Some(Param::new(Tensor::scalar(0.0))),
            modalities: vec![
                Param::new(Tensor::scalar(0.5)),
                Param::new(Tensor::scalar(0.5)),
            ],
            rescale: None,
        };
        let out = fuse_level(&mut g, Some(c), &[h1, h2], &level, FusionMode::Plain).unwrap();
        for ((o, a), b) in g.value(out).data().iter().zip(g.value(h1).data()).zip(g.value(h2).data()) {
            assert!((o - 0.5 * (a + b)).abs() < 1e-12);
        }
    }

    #[test]
    fn rescale_at_one_matches_plain_mode() {
        let mut g: Graph<f64> = Graph::new(Mode::Eval);
        let mut r = rng(2);
        let c = g.input(rand_tensor(&[3, 5], &mut r));
        let h1 = g.input(rand_tensor(&[3, 5], &mut r));
        let h2 = g.input(rand_tensor(&[3, 5], &mut r));
        let level = FusionLevel::<f64> {
            central: Some(Param::new(Tensor::scalar(0.37))),
            modalities: vec![
                Param::new(Tensor::scalar(-0.8)),
                Param::new(Tensor::scalar(0.21)),
            ],
            rescale: Some(Param::new(Tensor::scalar(1.0))),
        };
        let plain = fuse_level(&mut g, Some(c), &[h1, h2], &level, FusionMode::Plain).unwrap();
        let rescaled =
            fuse_level(&mut g, Some(c), &[h1, h2], &level, FusionMode::Rescaled).unwrap();
        for (p, q) in g.value(plain).data().iter().zip(g.value(rescaled).data()) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn initial_weights_average_their_inputs() {
        let params = init_fusion_params::<f64>(2, 3, FusionMode::Rescaled);
        assert_eq!(params.levels.len(), 3);
        assert!(params.levels[0].central.is_none());
        let get = |p: &Param<f64>| p.borrow().data()[0];
        for m in &params.levels[0].modalities {
            assert!((get(m) - 0.5).abs() < 1e-12);
        }
        for level in &params.levels[1..] {
            assert!((get(level.central.as_ref().unwrap()) - 1.0 / 3.0).abs() < 1e-12);
            for m in &level.modalities {
                assert!((get(m) - 1.0 / 3.0).abs() < 1e-12);
            }
            assert!((get(level.rescale.as_ref().unwrap()) - 1.0).abs() < 1e-12);
        }

        // Fused output literally equals the mean of its inputs.
        let mut g: Graph<f64> = Graph::new(Mode::Eval);
        let mut r = rng(3);
        let c = g.input(rand_tensor(&[2, 4], &mut r));
        let h1 = g.input(rand_tensor(&[2, 4], &mut r));
        let h2 = g.input(rand_tensor(&[2, 4], &mut r));
        let out =
            fuse_level(&mut g, Some(c), &[h1, h2], &params.levels[1], FusionMode::Rescaled)
                .unwrap();
        for (((o, a), b), cv) in g
            .value(out)
            .data()
            .iter()
            .zip(g.value(h1).data())
            .zip(g.value(h2).data())
            .zip(g.value(c).data())
        {
            assert!((o - (a + b + cv) / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_produces_aligned_heads() {
        let spec = tiny_mlp_spec(true, FusionMode::Rescaled);
        let model: CentralNet<f64> = CentralNet::init(spec, 7).unwrap();
        let mut g = Graph::new(Mode::Eval);
        let mut r = rng(4);
        let x1 = g.input(rand_tensor(&[3, 5], &mut r));
        let x2 = g.input(rand_tensor(&[3, 5], &mut r));
        let out = model.forward(&mut g, &[x1, x2], &mut r).unwrap();
        assert_eq!(g.value(out.central_logits).shape(), &[3, 3]);
        assert_eq!(out.modality_logits.len(), 2);
        for &m in &out.modality_logits {
            assert_eq!(g.value(m).shape(), g.value(out.central_logits).shape());
        }
        assert_eq!(out.fused_levels.len(), 4);
        assert!(!out.decision_is_probs);
    }

    #[test]
    fn early_fusion_limit_ignores_deep_unimodal_activations() {
        let spec = tiny_mlp_spec(false, FusionMode::Plain);
        let model: CentralNet<f64> = CentralNet::init(spec, 8).unwrap();
        // Freeze every modality weight at levels > 0.
        for level in &model.fusion.levels[1..] {
            for m in &level.modalities {
                m.borrow_mut().data_mut()[0] = 0.0;
            }
        }
        let mut r = rng(5);
        let x1 = rand_tensor(&[4, 5], &mut r);
        let x2 = rand_tensor(&[4, 5], &mut r);

        let run = |model: &CentralNet<f64>, a: &Tensor<f64>, b: &Tensor<f64>| {
            let mut g = Graph::new(Mode::Eval);
            let a = g.input(a.clone());
            let b = g.input(b.clone());
            let out = model.forward(&mut g, &[a, b], &mut rng(0)).unwrap();
            g.value(out.central_logits).data().to_vec()
        };
        let before = run(&model, &x1, &x2);
        // Perturb unimodal layers (shallow and deep); with every modality
        // weight frozen at levels > 0 the central logits must not move,
        // because only the level-0 fused tensor (the raw inputs) reaches
        // the central tower.
        for block in [&model.towers[0].blocks[1], &model.towers[0].blocks[0]] {
            for v in block.w.borrow_mut().data_mut() {
                *v += 0.731;
            }
        }
        let after = run(&model, &x1, &x2);
        assert_eq!(before, after);
        // Sanity: the inputs themselves do reach the output.
        let mut x1_bumped = x1.clone();
        x1_bumped.data_mut()[0] += 0.5;
        assert_ne!(run(&model, &x1_bumped, &x2), after);
    }

    #[test]
    fn late_fusion_limit_matches_hand_built_score_sum() {
        let spec = tiny_mlp_spec(false, FusionMode::Plain);
        let model: CentralNet<f64> = CentralNet::init(spec, 9).unwrap();
        let n_levels = model.n_fused_levels();
        // Zero the central weights at every level before the final sum and
        // the modality weights at the interior levels.
        for level in &model.fusion.levels[1..n_levels - 1] {
            if let Some(c) = &level.central {
                c.borrow_mut().data_mut()[0] = 0.0;
            }
            for m in &level.modalities {
                m.borrow_mut().data_mut()[0] = 0.0;
            }
        }
        let mut r = rng(6);
        let x1 = rand_tensor(&[4, 5], &mut r);
        let x2 = rand_tensor(&[4, 5], &mut r);

        let mut g = Graph::new(Mode::Eval);
        let a = g.input(x1.clone());
        let b = g.input(x2.clone());
        let out = model.forward(&mut g, &[a, b], &mut rng(0)).unwrap();
        let model_logits = g.value(out.central_logits).data().to_vec();

        // Hand-built graph: unimodal heads plus the central prediction layer
        // applied to a zero tensor (everything upstream was frozen out),
        // summed in the same order as the model's final level.
        let mut g2 = Graph::new(Mode::Eval);
        let a2 = g2.input(x1);
        let b2 = g2.input(x2);
        let mut rr = rng(0);
        let preds: Vec<NodeId> = model
            .towers
            .iter()
            .zip([a2, b2])
            .map(|(t, x)| *t.forward(&mut g2, x, &mut rr).unwrap().last().unwrap())
            .collect();
        let zero_in = g2.input(Tensor::zeros(&[4, 6]));
        let central_pred = model.central.last().unwrap().forward(&mut g2, zero_in, &mut rr).unwrap();
        let last = &model.fusion.levels[n_levels - 1];
        let hand =
            fuse_level(&mut g2, Some(central_pred), &preds, last, FusionMode::Plain).unwrap();
        assert_eq!(model_logits, g2.value(hand).data());
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let spec = tiny_mlp_spec(true, FusionMode::Rescaled);
        let model: CentralNet<f64> = CentralNet::init(spec, 10).unwrap();
        let mut g = Graph::new(Mode::Train);
        let mut r = rng(11);
        let x1 = g.input(rand_tensor(&[6, 5], &mut r));
        let x2 = g.input(rand_tensor(&[6, 5], &mut r));
        let out = model.forward(&mut g, &[x1, x2], &mut r).unwrap();
        let labels = [0u32, 1, 2, 0, 1, 2];
        let mut loss = g.softmax_cross_entropy(out.central_logits, &labels).unwrap();
        for &m in &out.modality_logits {
            let l = g.softmax_cross_entropy(m, &labels).unwrap();
            loss = g.add(loss, l).unwrap();
        }
        g.backward(loss).unwrap();
        for (name, p) in model.named_params() {
            let t = p.borrow();
            let grad = t.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
            let max = grad.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            assert!(max > 0.0, "{name} gradient is identically zero");
        }
    }

    #[test]
    fn alpha_report_normalizes_and_flags_degenerate_levels() {
        let spec = tiny_mlp_spec(false, FusionMode::Plain);
        let model: CentralNet<f64> = CentralNet::init(spec, 12).unwrap();
        let set = |p: &Param<f64>, v: f64| p.borrow_mut().data_mut()[0] = v;
        // Level 0: [0.5, 0.5] → [50, 50].
        set(&model.fusion.levels[0].modalities[0], 0.5);
        set(&model.fusion.levels[0].modalities[1], 0.5);
        // Level 1: [0.6 central, 0.2, 0.2] → [60, 20, 20].
        set(model.fusion.levels[1].central.as_ref().unwrap(), 0.6);
        set(&model.fusion.levels[1].modalities[0], 0.2);
        set(&model.fusion.levels[1].modalities[1], 0.2);
        // Level 2: all zero → degenerate.
        set(model.fusion.levels[2].central.as_ref().unwrap(), 0.0);
        set(&model.fusion.levels[2].modalities[0], 0.0);
        set(&model.fusion.levels[2].modalities[1], 0.0);

        let report = model.report_alphas();
        assert_eq!(report[0].central_pct, None);
        assert_eq!(report[0].modality_pct, vec![50.0, 50.0]);
        assert_eq!(report[1].central_pct, Some(60.0));
        assert!((report[1].modality_pct[0] - 20.0).abs() < 1e-9);
        assert!(report[2].degenerate);
        assert!((report[2].central_pct.unwrap() - 100.0 / 3.0).abs() < 1e-9);

        // Scale invariance: multiplying a level by a positive constant does
        // not change its report.
        set(model.fusion.levels[1].central.as_ref().unwrap(), 0.6 * 7.3);
        set(&model.fusion.levels[1].modalities[0], 0.2 * 7.3);
        set(&model.fusion.levels[1].modalities[1], 0.2 * 7.3);
        let rescaled = model.report_alphas();
        assert!((rescaled[1].central_pct.unwrap() - 60.0).abs() < 1e-9);
        assert!((rescaled[1].modality_pct[1] - 20.0).abs() < 1e-9);
    }

    #[test]
    fn validate_rejects_malformed_specs() {
        // Prediction layer not last.
        let mut spec = tiny_mlp_spec(false, FusionMode::Plain);
        spec.towers[0].layers.swap(1, 2);
        assert!(matches!(spec.validate(), Err(Error::Config(_))));

        // Central depth off by one.
        let mut spec = tiny_mlp_spec(false, FusionMode::Plain);
        spec.central.pop();
        assert!(matches!(spec.validate(), Err(Error::Config(_))));

        // Mismatched fused depths.
        let mut spec = tiny_mlp_spec(false, FusionMode::Plain);
        spec.towers[1].fusion_start = 1;
        assert!(spec.validate().is_err());

        // One tower is not multimodal.
        let mut spec = tiny_mlp_spec(false, FusionMode::Plain);
        spec.towers.truncate(1);
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_padding_aligns_unequal_feature_widths() {
        // Tower 1 sees 3-wide inputs, tower 2 sees 5-wide; level 0 pads to 5.
        let mk = |d: usize| TowerSpec {
            input_shape: vec![d],
            layers: vec![LayerSpec::dense(4, 0.0), LayerSpec::prediction(2, false)],
            fusion_start: 0,
        };
        let towers = vec![mk(3), mk(5)];
        let central = vec![
            LayerSpec { kind: LayerKind::Dense, width: 4, activation: Activation::Relu, dropout_p: 0.0, batchnorm: false },
            LayerSpec::prediction(2, false),
        ];
        let spec = NetworkSpec {
            towers,
            central,
            n_classes: 2,
            multilabel: false,
            fusion_mode: FusionMode::Plain,
            projection: Projection::ZeroPad,
        };
        // Central layer 0 consumes the aligned width (5): rebuild to match.
        assert_eq!(spec.fused_level_shapes().unwrap()[0], vec![5]);
        spec.validate().unwrap();

        let model: CentralNet<f64> = CentralNet::init(spec.clone(), 13).unwrap();
        let mut g = Graph::new(Mode::Eval);
        let mut r = rng(14);
        let x1 = g.input(rand_tensor(&[2, 3], &mut r));
        let x2 = g.input(rand_tensor(&[2, 5], &mut r));
        let out = model.forward(&mut g, &[x1, x2], &mut r).unwrap();
        assert_eq!(g.value(out.central_logits).shape(), &[2, 2]);

        // Linear projection variant also builds and runs.
        let spec = NetworkSpec { projection: Projection::Linear, ..spec };
        let model: CentralNet<f64> = CentralNet::init(spec, 15).unwrap();
        assert!(model.projections[0][0].is_some());
        assert!(model.projections[1][0].is_none());
        let mut g = Graph::new(Mode::Eval);
        let x1 = g.input(rand_tensor(&[2, 3], &mut r));
        let x2 = g.input(rand_tensor(&[2, 5], &mut r));
        let out = model.forward(&mut g, &[x1, x2], &mut r).unwrap();
        assert_eq!(g.value(out.central_logits).shape(), &[2, 2]);
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"tower0.proj.level0.weight".to_string()));
    }
}
