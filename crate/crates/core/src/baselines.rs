//! Comparison fusion methods: trainable weighted averaging of unimodal
//! scores, score concatenation through a linear head (plain, with
//! per-modality auxiliary losses, or with modality dropping), gated
//! multimodal units, elementwise fusion at a chosen depth followed by a
//! single shared continuation stack, and probability-averaging ensembles.
//!
//! All methods reuse the unimodal tower machinery from [`crate::fusion`],
//! so a baseline and a fusion network built from the same [`TowerSpec`]s
//! see identical per-modality feature extractors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    flatten, he_uniform, BnBlock, LayerBlock, LayerKind, ModelOutputs, NetworkSpec, Tower,
    TowerSpec,
};
use crate::tensor::{Graph, Mode, NodeId, Param, Scalar, Tensor};

/// Elementwise combination used by depth fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    Sum,
    Prod,
    Subtract,
}

impl Combiner {
    pub fn name(&self) -> &'static str {
        match self {
            Combiner::Sum => "sum",
            Combiner::Prod => "prod",
            Combiner::Subtract => "subtract",
        }
    }
}

/// Which comparison method a [`BaselineSpec`] describes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum BaselineMethod {
    /// A single tower trained on one modality alone — the per-modality
    /// reference row every fusion method is compared against. The spec
    /// still lists all towers so the model can consume (and check) the
    /// full multimodal dataset.
    Unimodal { modality: usize },
    /// Trainable weighted average of the unimodal score vectors; weights
    /// start at `1/n`.
    WeightedMean,
    /// Concatenated unimodal scores through one linear layer.
    Concat,
    /// `Concat` plus a supervised loss on every unimodal head.
    ConcatMultitask,
    /// `Concat` whose inputs are modality-dropped during training: each
    /// modality's input tensor is independently zeroed per sample with
    /// probability `p_drop` (no rescaling, no resampling when every
    /// modality drops); evaluation always sees all modalities.
    ModDrop { p_drop: f64 },
    /// Gated multimodal unit over the towers' last hidden representations:
    /// with two modalities `h = z⊙tanh(W₁h₁) + (1−z)⊙tanh(W₂h₂)` where
    /// `z = sigmoid(W_z·[h₁;h₂])`; with more, per-modality gates are
    /// normalized by a softmax across modalities.
    Gmu,
    /// Elementwise combination of the towers' representations at `layer`
    /// (0 = raw input, depth = prediction scores), continued by one shared
    /// stack of the remaining layers.
    DepthFusion { layer: usize, combiner: Combiner },
    /// One full classifier per modality, trained jointly; the decision is
    /// the arithmetic mean of their post-softmax (or post-sigmoid)
    /// outputs. `members` must equal the modality count.
    Ensemble { members: usize },
    /// The per-modality classifiers plus an independent depth-fusion
    /// classifier, all averaged as one ensemble.
    FusionPlusEnsemble { layer: usize, combiner: Combiner },
}

impl BaselineMethod {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineMethod::Unimodal { .. } => "unimodal",
            BaselineMethod::WeightedMean => "weighted_mean",
            BaselineMethod::Concat => "concat",
            BaselineMethod::ConcatMultitask => "concat_multitask",
            BaselineMethod::ModDrop { .. } => "moddrop",
            BaselineMethod::Gmu => "gmu",
            BaselineMethod::DepthFusion { .. } => "depth_fusion",
            BaselineMethod::Ensemble { .. } => "ensemble",
            BaselineMethod::FusionPlusEnsemble { .. } => "fusion_plus_ensemble",
        }
    }
}

/// A comparison model: the method plus the full unimodal stacks it builds
/// on. Every tower must end in a prediction layer of `n_classes` units,
/// even for methods that internally fuse below it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub method: BaselineMethod,
    pub towers: Vec<TowerSpec>,
    pub n_classes: usize,
    pub multilabel: bool,
}

impl BaselineSpec {
    pub fn validate(&self) -> Result<()> {
        if self.towers.len() < 2 {
            return Err(Error::Config(format!(
                "baseline methods need at least two modalities, got {}",
                self.towers.len()
            )));
        }
        let mut rep_shapes = Vec::with_capacity(self.towers.len());
        for (k, tower) in self.towers.iter().enumerate() {
            if tower.layers.is_empty() {
                return Err(Error::Config(format!("tower {k} has no layers")));
            }
            let last = tower.layers.last().expect("non-empty");
            if last.kind != LayerKind::Prediction || last.width != self.n_classes {
                return Err(Error::Config(format!(
                    "tower {k} must end in a {}-way prediction layer",
                    self.n_classes
                )));
            }
            rep_shapes.push(NetworkSpec::tower_rep_shapes(tower)?);
        }
        match self.method {
            BaselineMethod::Unimodal { modality } => {
                if modality >= self.towers.len() {
                    return Err(Error::Config(format!(
                        "unimodal model selects modality {modality}, dataset has {}",
                        self.towers.len()
                    )));
                }
            }
            BaselineMethod::ModDrop { p_drop } => {
                if !(0.0..1.0).contains(&p_drop) {
                    return Err(Error::Config(format!(
                        "moddrop p_drop must lie in [0, 1), got {p_drop}"
                    )));
                }
            }
            BaselineMethod::Gmu => {
                let mut width: Option<usize> = None;
                for (k, (tower, shapes)) in self.towers.iter().zip(&rep_shapes).enumerate() {
                    if tower.layers.len() < 2 {
                        return Err(Error::Config(format!(
                            "gmu needs a hidden layer below the prediction layer in tower {k}"
                        )));
                    }
                    let w: usize = shapes[tower.layers.len() - 1].iter().product();
                    match width {
                        None => width = Some(w),
                        Some(prev) if prev != w => {
                            return Err(Error::Shape(format!(
                                "gmu requires same-width hidden representations, \
                                 got {prev} and {w}"
                            )));
                        }
                        Some(_) => {}
                    }
                }
            }
            BaselineMethod::DepthFusion { layer, .. }
            | BaselineMethod::FusionPlusEnsemble { layer, .. } => {
                let depth = self.towers[0].layers.len();
                if layer > depth {
                    return Err(Error::Config(format!(
                        "fusion layer {layer} exceeds tower depth {depth}"
                    )));
                }
                for (k, tower) in self.towers.iter().enumerate().skip(1) {
                    if tower.layers.len() != depth
                        || tower.layers[layer..] != self.towers[0].layers[layer..]
                    {
                        return Err(Error::Config(format!(
                            "depth fusion requires modality {k} to share the layer stack \
                             from layer {layer} on"
                        )));
                    }
                    if rep_shapes[k][layer] != rep_shapes[0][layer] {
                        return Err(Error::Shape(format!(
                            "modalities disagree at fusion layer {layer}: {:?} vs {:?}",
                            rep_shapes[0][layer], rep_shapes[k][layer]
                        )));
                    }
                }
            }
            BaselineMethod::Ensemble { members } => {
                if members != self.towers.len() {
                    return Err(Error::Config(format!(
                        "ensemble trains one classifier per modality: requested {members} \
                         members for {} modalities",
                        self.towers.len()
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Per-sample keep decisions for one modality: `false` (drop) with
/// probability `p_drop`.
pub fn moddrop_keep(n: usize, p_drop: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..n).map(|_| rng.gen::<f64>() >= p_drop).collect()
}

/// Zero whole samples of `x` where `keep` is false (constant mask, so the
/// surviving samples backpropagate unscaled).
fn mask_samples<T: Scalar>(g: &mut Graph<T>, x: NodeId, keep: &[bool]) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    if shape[0] != keep.len() {
        return Err(Error::Shape(format!(
            "mask for {} samples applied to batch of {}",
            keep.len(),
            shape[0]
        )));
    }
    let per: usize = shape[1..].iter().product();
    let data: Vec<T> = keep
        .iter()
        .flat_map(|&k| {
            std::iter::repeat(if k { T::from_f64(1.0) } else { T::from_f64(0.0) }).take(per)
        })
        .collect();
    let mask = g.input(Tensor::new(&shape, data)?);
    g.mul(x, mask)
}

/// Bimodal gated blend `z⊙a + (1−z)⊙b`.
pub fn gmu_blend<T: Scalar>(g: &mut Graph<T>, z: NodeId, a: NodeId, b: NodeId) -> Result<NodeId> {
    let za = g.mul(z, a)?;
    let complement = g.affine(z, T::from_f64(-1.0), T::from_f64(1.0))?;
    let zb = g.mul(complement, b)?;
    g.add(za, zb)
}

/// Elementwise combination of same-shape representations. `Subtract` is
/// the left fold `h₁ − h₂ − ⋯`.
pub fn combine_reps<T: Scalar>(
    g: &mut Graph<T>,
    reps: &[NodeId],
    combiner: Combiner,
) -> Result<NodeId> {
    let (&first, rest) = reps
        .split_first()
        .ok_or_else(|| Error::Input("no representations to combine".into()))?;
    let mut acc = first;
    for &r in rest {
        acc = match combiner {
            Combiner::Sum => g.add(acc, r)?,
            Combiner::Prod => g.mul(acc, r)?,
            Combiner::Subtract => g.sub(acc, r)?,
        };
    }
    Ok(acc)
}

/// Arithmetic mean of same-shape probability tensors.
pub fn average_probs<T: Scalar>(g: &mut Graph<T>, probs: &[NodeId]) -> Result<NodeId> {
    let (&first, rest) = probs
        .split_first()
        .ok_or_else(|| Error::Input("no predictions to average".into()))?;
    let mut acc = first;
    for &p in rest {
        acc = g.add(acc, p)?;
    }
    g.affine(acc, T::from_f64(1.0 / probs.len() as f64), T::from_f64(0.0))
}

/// Elementwise fusion at a fixed layer with one shared continuation. The
/// per-modality towers hold layers `0..layer` of the original stacks; the
/// shared stack holds layers `layer..` of the first tower's spec (the
/// validated specs agree from `layer` on).
pub struct DepthFusionNet<T: Scalar> {
    pub layer: usize,
    pub combiner: Combiner,
    pub towers: Vec<Tower<T>>,
    pub shared: Vec<LayerBlock<T>>,
}

impl<T: Scalar> DepthFusionNet<T> {
    /// Randomness order: truncated towers in modality order, then the
    /// shared continuation.
    fn init(
        towers: &[TowerSpec],
        layer: usize,
        combiner: Combiner,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut trunks = Vec::with_capacity(towers.len());
        for spec in towers {
            let trunk = TowerSpec {
                input_shape: spec.input_shape.clone(),
                layers: spec.layers[..layer].to_vec(),
                fusion_start: 0,
            };
            trunks.push(Tower::init(&trunk, rng)?);
        }
        let shapes = NetworkSpec::tower_rep_shapes(&towers[0])?;
        let mut shared = Vec::with_capacity(towers[0].layers.len() - layer);
        let mut shape = shapes[layer].clone();
        for spec in &towers[0].layers[layer..] {
            let (block, out) = LayerBlock::init(spec, &shape, rng)?;
            shared.push(block);
            shape = out;
        }
        Ok(Self { layer, combiner, towers: trunks, shared })
    }

    /// Returns `(logits, fused_tensor)`.
    fn forward(
        &self,
        g: &mut Graph<T>,
        inputs: &[NodeId],
        rng: &mut ChaCha8Rng,
    ) -> Result<(NodeId, NodeId)> {
        let mut reps = Vec::with_capacity(self.towers.len());
        for (tower, &input) in self.towers.iter().zip(inputs) {
            reps.push(*tower.forward(g, input, rng)?.last().expect("input rep"));
        }
        let fused = combine_reps(g, &reps, self.combiner)?;
        let mut cur = fused;
        for block in &self.shared {
            cur = block.forward(g, cur, rng)?;
        }
        Ok((cur, fused))
    }

    fn push_named_params(&self, prefix: &str, out: &mut Vec<(String, Param<T>)>) {
        for (k, tower) in self.towers.iter().enumerate() {
            tower.push_named_params(&format!("{prefix}tower{k}"), out);
        }
        for (j, block) in self.shared.iter().enumerate() {
            block.push_named_params(&format!("{prefix}shared.layer{}", self.layer + j), out);
        }
    }

    fn push_named_bn<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a BnBlock<T>)>) {
        for (k, tower) in self.towers.iter().enumerate() {
            push_tower_bn(&format!("{prefix}tower{k}"), tower, out);
        }
        for (j, block) in self.shared.iter().enumerate() {
            if let Some(bn) = &block.bn {
                out.push((format!("{prefix}shared.layer{}.bn", self.layer + j), bn));
            }
        }
    }
}

fn push_tower_bn<'a, T: Scalar>(
    prefix: &str,
    tower: &'a Tower<T>,
    out: &mut Vec<(String, &'a BnBlock<T>)>,
) {
    for (i, block) in tower.blocks.iter().enumerate() {
        if let Some(bn) = &block.bn {
            out.push((format!("{prefix}.layer{i}.bn"), bn));
        }
    }
}

/// One classifier inside an ensemble.
enum Member<T: Scalar> {
    Unimodal { modality: usize, tower: Tower<T> },
    Fusion(DepthFusionNet<T>),
}

enum Kind<T: Scalar> {
    Solo { modality: usize, tower: Tower<T> },
    WeightedMean { towers: Vec<Tower<T>>, weights: Vec<Param<T>> },
    Concat { towers: Vec<Tower<T>>, w: Param<T>, b: Param<T>, p_drop: f64, multitask: bool },
    Gmu { towers: Vec<Tower<T>>, head: GmuHead<T> },
    DepthFusion(DepthFusionNet<T>),
    Ensemble { members: Vec<Member<T>> },
}

struct GmuHead<T: Scalar> {
    /// Per-modality candidate transforms (weight, bias), width → width.
    candidates: Vec<(Param<T>, Param<T>)>,
    /// Gate transforms (weight, bias), K·width → width: one entry for the
    /// bimodal sigmoid form, K entries for the softmax form.
    gates: Vec<(Param<T>, Param<T>)>,
    /// Prediction head, width → n_classes.
    pred: (Param<T>, Param<T>),
    width: usize,
}

fn init_towers<T: Scalar>(specs: &[TowerSpec], rng: &mut ChaCha8Rng) -> Result<Vec<Tower<T>>> {
    specs.iter().map(|s| Tower::init(s, rng)).collect()
}

fn linear_pair<T: Scalar>(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> (Param<T>, Param<T>) {
    (Param::new(he_uniform(&[d_in, d_out], d_in, rng)), Param::new(Tensor::zeros(&[d_out])))
}

/// An initialized comparison model.
pub struct BaselineModel<T: Scalar> {
    pub spec: BaselineSpec,
    kind: Kind<T>,
}

impl<T: Scalar> BaselineModel<T> {
    /// Build and initialize the model. Randomness order: towers in
    /// modality order (truncated where the method fuses below the
    /// prediction layer), then any head parameters; ensembles draw their
    /// members in listed order with the fusion member last.
    pub fn init(spec: BaselineSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = spec.towers.len();
        let kind = match spec.method {
            BaselineMethod::Unimodal { modality } => {
                Kind::Solo { modality, tower: Tower::init(&spec.towers[modality], &mut rng)? }
            }
            BaselineMethod::WeightedMean => {
                let towers = init_towers(&spec.towers, &mut rng)?;
                let w0 = T::from_f64(1.0 / n as f64);
                let weights = (0..n)
                    .map(|_| Param::new(Tensor::new(&[1], vec![w0]).expect("scalar")))
                    .collect();
                Kind::WeightedMean { towers, weights }
            }
            BaselineMethod::Concat
            | BaselineMethod::ConcatMultitask
            | BaselineMethod::ModDrop { .. } => {
                let towers = init_towers(&spec.towers, &mut rng)?;
                let (w, b) = linear_pair(n * spec.n_classes, spec.n_classes, &mut rng);
                let p_drop = match spec.method {
                    BaselineMethod::ModDrop { p_drop } => p_drop,
                    _ => 0.0,
                };
                let multitask = spec.method == BaselineMethod::ConcatMultitask;
                Kind::Concat { towers, w, b, p_drop, multitask }
            }
            BaselineMethod::Gmu => {
                let trunks: Vec<TowerSpec> = spec
                    .towers
                    .iter()
                    .map(|t| TowerSpec {
                        input_shape: t.input_shape.clone(),
                        layers: t.layers[..t.layers.len() - 1].to_vec(),
                        fusion_start: 0,
                    })
                    .collect();
                let towers = init_towers(&trunks, &mut rng)?;
                let shapes = NetworkSpec::tower_rep_shapes(&spec.towers[0])?;
                let width: usize = shapes[spec.towers[0].layers.len() - 1].iter().product();
                let candidates =
                    (0..n).map(|_| linear_pair(width, width, &mut rng)).collect::<Vec<_>>();
                let n_gates = if n == 2 { 1 } else { n };
                let gates = (0..n_gates)
                    .map(|_| linear_pair(n * width, width, &mut rng))
                    .collect::<Vec<_>>();
                let pred = linear_pair(width, spec.n_classes, &mut rng);
                Kind::Gmu { towers, head: GmuHead { candidates, gates, pred, width } }
            }
            BaselineMethod::DepthFusion { layer, combiner } => {
                Kind::DepthFusion(DepthFusionNet::init(&spec.towers, layer, combiner, &mut rng)?)
            }
            BaselineMethod::Ensemble { .. } => {
                let members = spec
                    .towers
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        Ok(Member::Unimodal { modality: k, tower: Tower::init(t, &mut rng)? })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Kind::Ensemble { members }
            }
            BaselineMethod::FusionPlusEnsemble { layer, combiner } => {
                let mut members = spec
                    .towers
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        Ok(Member::Unimodal { modality: k, tower: Tower::init(t, &mut rng)? })
                    })
                    .collect::<Result<Vec<_>>>()?;
                members.push(Member::Fusion(DepthFusionNet::init(
                    &spec.towers,
                    layer,
                    combiner,
                    &mut rng,
                )?));
                Kind::Ensemble { members }
            }
        };
        Ok(Self { spec, kind })
    }

    /// Run the model on one batch (one input node per modality).
    ///
    /// `fused_levels` carries method-specific inspection tensors: the fused
    /// hidden plus the gate tensor for GMU (`z` for the bimodal form, the
    /// `[n, K, width]` softmax stack otherwise), and the fused tensor for
    /// depth fusion.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        inputs: &[NodeId],
        rng: &mut ChaCha8Rng,
    ) -> Result<ModelOutputs> {
        if inputs.len() != self.spec.towers.len() {
            return Err(Error::Input(format!(
                "model has {} modalities but got {} inputs",
                self.spec.towers.len(),
                inputs.len()
            )));
        }
        match &self.kind {
            Kind::Solo { modality, tower } => {
                let reps = tower.forward(g, inputs[*modality], rng)?;
                let logits = *reps.last().expect("input rep");
                Ok(ModelOutputs {
                    central_logits: logits,
                    modality_logits: vec![],
                    fused_levels: vec![],
                    decision: logits,
                    decision_is_probs: false,
                })
            }
            Kind::WeightedMean { towers, weights } => {
                let preds = forward_preds(g, towers, inputs, rng)?;
                let mut decision: Option<NodeId> = None;
                for (weight, &pred) in weights.iter().zip(&preds) {
                    let alpha = g.param(weight);
                    let term = g.scale(alpha, pred)?;
                    decision = Some(match decision {
                        None => term,
                        Some(acc) => g.add(acc, term)?,
                    });
                }
                let decision = decision.expect("at least two modalities");
                Ok(ModelOutputs {
                    central_logits: decision,
                    modality_logits: preds,
                    fused_levels: vec![],
                    decision,
                    decision_is_probs: false,
                })
            }
            Kind::Concat { towers, w, b, p_drop, .. } => {
                // Modality-drop masks are drawn up front, one per modality
                // in order, so the draw sequence is independent of tower
                // internals.
                let inputs: Vec<NodeId> = if g.mode() == Mode::Train && *p_drop > 0.0 {
                    let n = g.value(inputs[0]).shape()[0];
                    let keeps: Vec<Vec<bool>> =
                        (0..inputs.len()).map(|_| moddrop_keep(n, *p_drop, rng)).collect();
                    inputs
                        .iter()
                        .zip(&keeps)
                        .map(|(&x, keep)| mask_samples(g, x, keep))
                        .collect::<Result<_>>()?
                } else {
                    inputs.to_vec()
                };
                let preds = forward_preds(g, towers, &inputs, rng)?;
                let cat = g.concat_cols(&preds)?;
                let wn = g.param(w);
                let bn = g.param(b);
                let decision = g.dense(cat, wn, bn)?;
                Ok(ModelOutputs {
                    central_logits: decision,
                    modality_logits: preds,
                    fused_levels: vec![],
                    decision,
                    decision_is_probs: false,
                })
            }
            Kind::Gmu { towers, head } => {
                let mut hiddens = Vec::with_capacity(towers.len());
                for (tower, &input) in towers.iter().zip(inputs) {
                    let reps = tower.forward(g, input, rng)?;
                    hiddens.push(flatten(g, *reps.last().expect("input rep"))?);
                }
                let mut candidates = Vec::with_capacity(hiddens.len());
                for ((cw, cb), &h) in head.candidates.iter().zip(&hiddens) {
                    let wn = g.param(cw);
                    let bn = g.param(cb);
                    let lin = g.dense(h, wn, bn)?;
                    candidates.push(g.tanh(lin)?);
                }
                let cat = g.concat_cols(&hiddens)?;
                let k = hiddens.len();
                let (fused, gate) = if k == 2 {
                    let (gw, gb) = &head.gates[0];
                    let wn = g.param(gw);
                    let bn = g.param(gb);
                    let lin = g.dense(cat, wn, bn)?;
                    let z = g.sigmoid(lin)?;
                    (gmu_blend(g, z, candidates[0], candidates[1])?, z)
                } else {
                    let mut scores = Vec::with_capacity(k);
                    for (gw, gb) in &head.gates {
                        let wn = g.param(gw);
                        let bn = g.param(gb);
                        scores.push(g.dense(cat, wn, bn)?);
                    }
                    let stacked = g.concat_cols(&scores)?;
                    let n = g.value(stacked).shape()[0];
                    let cube = g.reshape(stacked, &[n, k, head.width])?;
                    let gates = g.softmax(cube, 1)?;
                    let flat = g.reshape(gates, &[n, k * head.width])?;
                    let mut acc: Option<NodeId> = None;
                    for (i, &cand) in candidates.iter().enumerate() {
                        let z = g.slice_cols(flat, i * head.width, head.width)?;
                        let term = g.mul(z, cand)?;
                        acc = Some(match acc {
                            None => term,
                            Some(prev) => g.add(prev, term)?,
                        });
                    }
                    (acc.expect("at least two modalities"), gates)
                };
                let (pw, pb) = &head.pred;
                let wn = g.param(pw);
                let bn = g.param(pb);
                let logits = g.dense(fused, wn, bn)?;
                Ok(ModelOutputs {
                    central_logits: logits,
                    modality_logits: vec![],
                    fused_levels: vec![fused, gate],
                    decision: logits,
                    decision_is_probs: false,
                })
            }
            Kind::DepthFusion(net) => {
                let (logits, fused) = net.forward(g, inputs, rng)?;
                Ok(ModelOutputs {
                    central_logits: logits,
                    modality_logits: vec![],
                    fused_levels: vec![fused],
                    decision: logits,
                    decision_is_probs: false,
                })
            }
            Kind::Ensemble { members } => {
                let mut logits = Vec::with_capacity(members.len());
                let mut fused_levels = Vec::new();
                for member in members {
                    match member {
                        Member::Unimodal { modality, tower } => {
                            let reps = tower.forward(g, inputs[*modality], rng)?;
                            logits.push(*reps.last().expect("input rep"));
                        }
                        Member::Fusion(net) => {
                            let (l, fused) = net.forward(g, inputs, rng)?;
                            logits.push(l);
                            fused_levels.push(fused);
                        }
                    }
                }
                let probs = logits
                    .iter()
                    .map(|&l| {
                        if self.spec.multilabel {
                            g.sigmoid(l)
                        } else {
                            g.softmax(l, 1)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                let decision = average_probs(g, &probs)?;
                Ok(ModelOutputs {
                    central_logits: decision,
                    modality_logits: logits,
                    fused_levels,
                    decision,
                    decision_is_probs: true,
                })
            }
        }
    }

    /// The logits the loss supervises, as `(node, weight)` pairs: the
    /// decision head at weight 1, plus — for the multitask variant — every
    /// unimodal head at its per-modality `beta` (1.0 past the slice's
    /// end). Ensemble members are separate classifiers, not auxiliary
    /// tasks, so each is supervised at weight 1.
    pub fn supervised_heads(&self, out: &ModelOutputs, beta: &[f64]) -> Vec<(NodeId, f64)> {
        match &self.kind {
            Kind::Concat { multitask: true, .. } => {
                let mut heads = vec![(out.central_logits, 1.0)];
                heads.extend(
                    out.modality_logits
                        .iter()
                        .enumerate()
                        .map(|(k, &m)| (m, beta.get(k).copied().unwrap_or(1.0))),
                );
                heads
            }
            Kind::Ensemble { .. } => out.modality_logits.iter().map(|&m| (m, 1.0)).collect(),
            _ => vec![(out.central_logits, 1.0)],
        }
    }

    pub fn named_params(&self) -> Vec<(String, Param<T>)> {
        let mut out = Vec::new();
        match &self.kind {
            Kind::Solo { modality, tower } => {
                tower.push_named_params(&format!("tower{modality}"), &mut out);
            }
            Kind::WeightedMean { towers, weights } => {
                for (k, tower) in towers.iter().enumerate() {
                    tower.push_named_params(&format!("tower{k}"), &mut out);
                }
                for (k, w) in weights.iter().enumerate() {
                    out.push((format!("head.weight{k}"), w.clone()));
                }
            }
            Kind::Concat { towers, w, b, .. } => {
                for (k, tower) in towers.iter().enumerate() {
                    tower.push_named_params(&format!("tower{k}"), &mut out);
                }
                out.push(("head.weight".into(), w.clone()));
                out.push(("head.bias".into(), b.clone()));
            }
            Kind::Gmu { towers, head } => {
                for (k, tower) in towers.iter().enumerate() {
                    tower.push_named_params(&format!("tower{k}"), &mut out);
                }
                for (k, (cw, cb)) in head.candidates.iter().enumerate() {
                    out.push((format!("gmu.candidate{k}.weight"), cw.clone()));
                    out.push((format!("gmu.candidate{k}.bias"), cb.clone()));
                }
                for (i, (gw, gb)) in head.gates.iter().enumerate() {
                    out.push((format!("gmu.gate{i}.weight"), gw.clone()));
                    out.push((format!("gmu.gate{i}.bias"), gb.clone()));
                }
                out.push(("gmu.pred.weight".into(), head.pred.0.clone()));
                out.push(("gmu.pred.bias".into(), head.pred.1.clone()));
            }
            Kind::DepthFusion(net) => net.push_named_params("", &mut out),
            Kind::Ensemble { members } => {
                for (k, member) in members.iter().enumerate() {
                    match member {
                        Member::Unimodal { tower, .. } => {
                            tower.push_named_params(&format!("member{k}"), &mut out);
                        }
                        Member::Fusion(net) => {
                            net.push_named_params(&format!("member{k}."), &mut out);
                        }
                    }
                }
            }
        }
        out
    }

    /// Batch-norm blocks (running statistics live here) with stable names.
    pub fn named_bn(&self) -> Vec<(String, &BnBlock<T>)> {
        let mut out = Vec::new();
        match &self.kind {
            Kind::Solo { modality, tower } => {
                push_tower_bn(&format!("tower{modality}"), tower, &mut out);
            }
            Kind::WeightedMean { towers, .. }
            | Kind::Concat { towers, .. }
            | Kind::Gmu { towers, .. } => {
                for (k, tower) in towers.iter().enumerate() {
                    push_tower_bn(&format!("tower{k}"), tower, &mut out);
                }
            }
            Kind::DepthFusion(net) => net.push_named_bn("", &mut out),
            Kind::Ensemble { members } => {
                for (k, member) in members.iter().enumerate() {
                    match member {
                        Member::Unimodal { tower, .. } => {
                            push_tower_bn(&format!("member{k}"), tower, &mut out);
                        }
                        Member::Fusion(net) => {
                            net.push_named_bn(&format!("member{k}."), &mut out);
                        }
                    }
                }
            }
        }
        out
    }
}

fn forward_preds<T: Scalar>(
    g: &mut Graph<T>,
    towers: &[Tower<T>],
    inputs: &[NodeId],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<NodeId>> {
    towers
        .iter()
        .zip(inputs)
        .map(|(tower, &input)| Ok(*tower.forward(g, input, rng)?.last().expect("input rep")))
        .collect()
}
