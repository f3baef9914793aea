//! Training and evaluation harness: the joint multi-task loss, an
//! Adam-based mini-batch loop with optional learning-rate decay,
//! class-balanced batching and early stopping, metric evaluation, and
//! parallel multi-seed execution.

pub mod metrics;
pub mod stats;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::BaselineModel;
use crate::data::MultimodalDataset;
use crate::error::{Error, Result};
use crate::fusion::{BnBlock, CentralNet, ModelOutputs};
use crate::tensor::{AdamState, Graph, Mode, NodeId, Param, Scalar, Tensor};
use metrics::MetricSet;

/// Which per-head loss the supervised heads use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCe,
    WeightedBce,
}

/// Hyperparameters of one training run. `dropout_p` and `moddrop_p` are
/// carried here for the experiment configuration's benefit — they
/// parameterize model construction, not the loop itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplies the learning rate once per epoch; 1.0 disables decay.
    pub lr_decay_per_epoch: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_p: f64,
    /// Per-modality weight of the auxiliary losses; missing entries
    /// default to 1.0.
    pub beta: Vec<f64>,
    pub moddrop_p: f64,
    pub seed: u64,
    pub early_stopping: bool,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    pub loss: LossKind,
    /// Draw every batch with an equal number of samples per class.
    pub balanced_batches: bool,
    /// Samples held out from the end of the training set for validation
    /// (seed-independent); 0 trains on everything.
    pub val_holdout: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            lr_decay_per_epoch: 1.0,
            batch_size: 128,
            epochs: 100,
            dropout_p: 0.5,
            beta: vec![],
            moddrop_p: 0.0,
            seed: 0,
            early_stopping: false,
            patience: 10,
            loss: LossKind::SoftmaxCe,
            balanced_batches: false,
            val_holdout: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.lr_decay_per_epoch <= 0.0 || self.lr_decay_per_epoch > 1.0 {
            return Err(Error::Config(format!(
                "lr decay per epoch must lie in (0, 1], got {}",
                self.lr_decay_per_epoch
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epoch count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.moddrop_p) {
            return Err(Error::Config(format!(
                "moddrop probability must lie in [0, 1), got {}",
                self.moddrop_p
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout probability must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if let Some(b) = self.beta.iter().find(|b| **b < 0.0 || !b.is_finite()) {
            return Err(Error::Config(format!("beta weights must be finite and >= 0, got {b}")));
        }
        if self.early_stopping && self.patience == 0 {
            return Err(Error::Config("early stopping needs patience >= 1".into()));
        }
        Ok(())
    }
}

/// Any trainable architecture in this crate.
pub enum Model<T: Scalar> {
    Central(CentralNet<T>),
    Baseline(BaselineModel<T>),
}

impl<T: Scalar> Model<T> {
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        inputs: &[NodeId],
        rng: &mut ChaCha8Rng,
    ) -> Result<ModelOutputs> {
        match self {
            Model::Central(m) => m.forward(g, inputs, rng),
            Model::Baseline(m) => m.forward(g, inputs, rng),
        }
    }

    pub fn named_params(&self) -> Vec<(String, Param<T>)> {
        match self {
            Model::Central(m) => m.named_params(),
            Model::Baseline(m) => m.named_params(),
        }
    }

    pub fn named_bn(&self) -> Vec<(String, &BnBlock<T>)> {
        match self {
            Model::Central(m) => m.named_bn(),
            Model::Baseline(m) => m.named_bn(),
        }
    }

    /// `(logits, weight)` pairs the loss supervises. The central/decision
    /// head carries weight 1; unimodal auxiliary heads carry their β.
    pub fn supervised_heads(&self, out: &ModelOutputs, beta: &[f64]) -> Vec<(NodeId, f64)> {
        match self {
            Model::Central(_) => {
                let mut heads = vec![(out.central_logits, 1.0)];
                heads.extend(
                    out.modality_logits
                        .iter()
                        .enumerate()
                        .map(|(k, &m)| (m, beta.get(k).copied().unwrap_or(1.0))),
                );
                heads
            }
            Model::Baseline(m) => m.supervised_heads(out, beta),
        }
    }

    pub fn input_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            Model::Central(m) => m.spec.towers.iter().map(|t| t.input_shape.clone()).collect(),
            Model::Baseline(m) => m.spec.towers.iter().map(|t| t.input_shape.clone()).collect(),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Model::Central(m) => m.spec.n_classes,
            Model::Baseline(m) => m.spec.n_classes,
        }
    }

    pub fn is_multilabel(&self) -> bool {
        match self {
            Model::Central(m) => m.spec.multilabel,
            Model::Baseline(m) => m.spec.multilabel,
        }
    }

    pub fn method_name(&self) -> &'static str {
        match self {
            Model::Central(_) => "centralnet",
            Model::Baseline(m) => m.spec.method.name(),
        }
    }
}

/// `Σ weightᵢ · termᵢ` over scalar loss nodes.
pub fn weighted_sum_losses<T: Scalar>(
    g: &mut Graph<T>,
    terms: &[(NodeId, f64)],
) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for &(node, weight) in terms {
        let term =
            if weight == 1.0 { node } else { g.affine(node, T::from_f64(weight), T::zero())? };
        acc = Some(match acc {
            None => term,
            Some(prev) => g.add(prev, term)?,
        });
    }
    acc.ok_or_else(|| Error::Input("no loss terms to combine".into()))
}

/// The multi-task objective: central loss plus β-weighted unimodal
/// losses (missing β entries default to 1).
pub fn multitask_loss<T: Scalar>(
    g: &mut Graph<T>,
    central: NodeId,
    modality: &[NodeId],
    beta: &[f64],
) -> Result<NodeId> {
    let mut terms = vec![(central, 1.0)];
    terms.extend(
        modality.iter().enumerate().map(|(k, &m)| (m, beta.get(k).copied().unwrap_or(1.0))),
    );
    weighted_sum_losses(g, &terms)
}

/// One epoch's summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Sample-weighted mean supervised loss over the epoch's batches.
    pub train_loss: f64,
    /// Primary metric on the validation holdout, when one exists.
    pub val_metric: Option<f64>,
}

/// What a finished training run leaves behind (the model itself is
/// updated in place).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters the model now carries.
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Name of the validation metric ("accuracy" or "f1_samples"); empty
    /// without a holdout.
    pub val_metric_name: &'static str,
}

struct Snapshot<T: Scalar> {
    params: Vec<Vec<T>>,
    bn: Vec<crate::tensor::BnState>,
}

fn take_snapshot<T: Scalar>(model: &Model<T>) -> Snapshot<T> {
    Snapshot {
        params: model.named_params().iter().map(|(_, p)| p.borrow().data().to_vec()).collect(),
        bn: model.named_bn().iter().map(|(_, b)| b.state.borrow().clone()).collect(),
    }
}

fn restore_snapshot<T: Scalar>(model: &Model<T>, snap: &Snapshot<T>) {
    for ((_, p), data) in model.named_params().iter().zip(&snap.params) {
        p.borrow_mut().data_mut().copy_from_slice(data);
    }
    for ((_, b), state) in model.named_bn().iter().zip(&snap.bn) {
        *b.state.borrow_mut() = state.clone();
    }
}

/// Mini-batch targets in the form the configured loss consumes.
enum BatchTargets<T> {
    Classes(Vec<u32>),
    Multilabel(Vec<T>),
}

fn gather_targets<T: Scalar>(
    data: &MultimodalDataset,
    indices: &[usize],
    loss: LossKind,
) -> Result<BatchTargets<T>> {
    match loss {
        LossKind::SoftmaxCe => Ok(BatchTargets::Classes(data.gather_class_labels(indices)?)),
        LossKind::WeightedBce => Ok(BatchTargets::Multilabel(
            data.gather_multilabel_targets(indices)?
                .into_iter()
                .map(|v| T::from_f64(v as f64))
                .collect(),
        )),
    }
}

fn batch_inputs<T: Scalar>(
    g: &mut Graph<T>,
    shapes: &[Vec<usize>],
    data: &MultimodalDataset,
    indices: &[usize],
) -> Result<Vec<NodeId>> {
    (0..data.n_modalities())
        .map(|m| {
            let flat = data.gather(m, indices);
            let mut shape = vec![indices.len()];
            shape.extend(&shapes[m]);
            let values = flat.into_iter().map(|v| T::from_f64(v as f64)).collect();
            Ok(g.input(Tensor::new(&shape, values)?))
        })
        .collect()
}

fn supervised_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    out: &ModelOutputs,
    targets: &BatchTargets<T>,
    beta: &[f64],
) -> Result<NodeId> {
    let heads = model.supervised_heads(out, beta);
    let mut terms = Vec::with_capacity(heads.len());
    for (node, weight) in heads {
        let loss = match targets {
            BatchTargets::Classes(labels) => g.softmax_cross_entropy(node, labels)?,
            BatchTargets::Multilabel(t) => g.weighted_bce(node, t)?,
        };
        terms.push((loss, weight));
    }
    weighted_sum_losses(g, &terms)
}

/// Shape/label compatibility between a model, a dataset, and a loss.
fn check_model_data<T: Scalar>(
    model: &Model<T>,
    data: &MultimodalDataset,
    loss: Option<LossKind>,
) -> Result<Vec<Vec<usize>>> {
    data.validate()?;
    let shapes = model.input_shapes();
    if shapes.len() != data.n_modalities() {
        return Err(Error::Config(format!(
            "model reads {} modalities but the dataset carries {}",
            shapes.len(),
            data.n_modalities()
        )));
    }
    for (m, shape) in shapes.iter().enumerate() {
        let need: usize = shape.iter().product();
        let have = data.dims[m];
        if need != have {
            return Err(Error::Config(format!(
                "modality {m}: model input shape {shape:?} needs {need} values per sample, \
                 dataset provides {have}"
            )));
        }
    }
    if model.is_multilabel() != data.is_multilabel() {
        return Err(Error::Config(format!(
            "model is {} but dataset labels are {}",
            if model.is_multilabel() { "multilabel" } else { "single-label" },
            if data.is_multilabel() { "multilabel" } else { "single-label" }
        )));
    }
    if data.target_width() != model.n_classes() {
        return Err(Error::Config(format!(
            "model predicts {} classes, dataset targets have width {}",
            model.n_classes(),
            data.target_width()
        )));
    }
    if let Some(kind) = loss {
        let want_multilabel = kind == LossKind::WeightedBce;
        if want_multilabel != data.is_multilabel() {
            return Err(Error::Config(format!(
                "loss {:?} does not match the dataset's label kind",
                kind
            )));
        }
    }
    Ok(shapes)
}

/// Shuffle indices and cut them into batches (the last may be short).
fn shuffled_batches(
    indices: &[usize],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Class-balanced batches: each batch holds `batch_size / n_classes`
/// samples of every class, drawn from per-class shuffled queues that
/// reshuffle when exhausted. The epoch covers `ceil(n / batch_size)`
/// batches.
pub(crate) fn balanced_batches(
    labels: &[u32],
    indices: &[usize],
    n_classes: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    if batch_size % n_classes != 0 {
        return Err(Error::Config(format!(
            "balanced batching needs batch size divisible by the class count \
             ({batch_size} vs {n_classes})"
        )));
    }
    let per = batch_size / n_classes;
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for &i in indices {
        pools[labels[i] as usize].push(i);
    }
    if let Some(empty) = pools.iter().position(|p| p.is_empty()) {
        return Err(Error::Config(format!(
            "balanced batching needs samples of every class; class {empty} is absent"
        )));
    }
    let mut queues: Vec<Vec<usize>> = pools
        .iter()
        .map(|p| {
            let mut q = p.clone();
            q.shuffle(rng);
            q
        })
        .collect();
    let n_batches = indices.len().div_ceil(batch_size);
    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut batch = Vec::with_capacity(batch_size);
        for (c, queue) in queues.iter_mut().enumerate() {
            for _ in 0..per {
                if queue.is_empty() {
                    let mut refill = pools[c].clone();
                    refill.shuffle(rng);
                    *queue = refill;
                }
                batch.push(queue.pop().expect("non-empty pool"));
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Train `model` in place. Returns the per-epoch history; on non-finite
/// loss the run aborts with a divergence error. With early stopping (and
/// at the natural end of training when a holdout exists and early
/// stopping is on), the parameters of the best validation epoch are
/// restored.
pub fn train<T: Scalar>(
    model: &Model<T>,
    data: &MultimodalDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let shapes = check_model_data(model, data, Some(cfg.loss))?;
    let n = data.len();
    if n == 0 {
        return Err(Error::Input("empty training set".into()));
    }
    if cfg.val_holdout >= n {
        return Err(Error::Config(format!(
            "validation holdout {} swallows the whole training set of {n}",
            cfg.val_holdout
        )));
    }
    if cfg.early_stopping && cfg.val_holdout == 0 {
        return Err(Error::Config("early stopping needs a validation holdout".into()));
    }
    let holdout = cfg.val_holdout;
    let train_idx: Vec<usize> = (0..n - holdout).collect();
    let val_set = (holdout > 0).then(|| data.subset(&((n - holdout)..n).collect::<Vec<_>>()));
    let val_metric_name: &'static str = if holdout == 0 {
        ""
    } else if model.is_multilabel() {
        "f1_samples"
    } else {
        "accuracy"
    };

    // Labels for the balanced sampler (single-label tasks only).
    let class_labels = if cfg.balanced_batches {
        Some(data.gather_class_labels(&(0..n).collect::<Vec<_>>())?)
    } else {
        None
    };

    let params: Vec<Param<T>> = model.named_params().into_iter().map(|(_, p)| p).collect();
    let mut adam = AdamState::new(&params, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut history: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Snapshot<T>)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate * cfg.lr_decay_per_epoch.powi(epoch as i32);
        adam.set_lr(lr);
        let batches = match &class_labels {
            Some(labels) => balanced_batches(
                labels,
                &train_idx,
                model.n_classes(),
                cfg.batch_size,
                &mut rng,
            )?,
            None => shuffled_batches(&train_idx, cfg.batch_size, &mut rng),
        };
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in &batches {
            for p in &params {
                p.zero_grad();
            }
            let mut g = Graph::new(Mode::Train);
            let inputs = batch_inputs(&mut g, &shapes, data, batch)?;
            let out = model.forward(&mut g, &inputs, &mut rng)?;
            let targets = gather_targets::<T>(data, batch, cfg.loss)?;
            let loss = supervised_loss(&mut g, model, &out, &targets, &cfg.beta)?;
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss {value} at epoch {epoch} ({} samples into the epoch)",
                    seen
                )));
            }
            g.backward(loss)?;
            adam.step(&params)?;
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = loss_sum / seen as f64;

        let val_metric = match &val_set {
            Some(v) => Some(evaluate(model, v, cfg.batch_size)?.primary(model.is_multilabel())),
            None => None,
        };
        history.push(EpochRecord { epoch, learning_rate: lr, train_loss, val_metric });

        if let Some(metric) = val_metric {
            let improved = best.as_ref().map_or(true, |(b, _, _)| metric > *b);
            if improved {
                best = Some((metric, epoch, take_snapshot(model)));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.early_stopping && since_best >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let mut best_epoch = history.len().saturating_sub(1);
    if cfg.early_stopping {
        if let Some((_, epoch, snap)) = &best {
            restore_snapshot(model, snap);
            best_epoch = *epoch;
        }
    }
    Ok(TrainOutcome { history, best_epoch, stopped_early, val_metric_name })
}

/// Evaluate on a dataset in eval mode (batch statistics frozen, dropout
/// off, modality dropping off). Single-label tasks take the argmax;
/// multilabel tasks threshold at probability 0.5.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &MultimodalDataset,
    batch_size: usize,
) -> Result<MetricSet> {
    if data.len() == 0 {
        return Err(Error::Input("empty evaluation set".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("evaluation batch size must be positive".into()));
    }
    let shapes = check_model_data(model, data, None)?;
    // Eval-mode graphs consume no randomness; the stream only seeds the
    // forward signature.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = data.len();
    let k = model.n_classes();

    let mut pred_classes: Vec<u32> = Vec::new();
    let mut pred_bits: Vec<bool> = Vec::new();
    let all: Vec<usize> = (0..n).collect();
    for batch in all.chunks(batch_size) {
        let mut g = Graph::new(Mode::Eval);
        let inputs = batch_inputs(&mut g, &shapes, data, batch)?;
        let out = model.forward(&mut g, &inputs, &mut rng)?;
        let decision = g.value(out.decision);
        let rows = decision.data();
        if model.is_multilabel() {
            // Probabilities threshold at 0.5; logits equivalently at 0.
            let threshold = if out.decision_is_probs { 0.5 } else { 0.0 };
            pred_bits.extend(rows.iter().map(|v| v.as_f64() >= threshold));
        } else {
            for i in 0..batch.len() {
                let row = &rows[i * k..(i + 1) * k];
                let mut arg = 0usize;
                for (j, v) in row.iter().enumerate() {
                    if v.as_f64() > row[arg].as_f64() {
                        arg = j;
                    }
                }
                pred_classes.push(arg as u32);
            }
        }
    }

    if model.is_multilabel() {
        let truth_f = data.gather_multilabel_targets(&all)?;
        let truth: Vec<bool> = truth_f.iter().map(|&v| v >= 0.5).collect();
        metrics::multilabel_metrics(&pred_bits, &truth, n, k)
    } else {
        let truth = data.gather_class_labels(&all)?;
        metrics::single_label_metrics(&pred_classes, &truth, k)
    }
}

/// Run one job per seed in parallel (models are built inside the worker,
/// keeping non-`Send` graph machinery thread-local) and collect results
/// in seed order.
pub fn run_seeds<R, F>(seeds: &[u64], run: F) -> Result<Vec<R>>
where
    F: Fn(u64) -> Result<R> + Sync,
    R: Send,
{
    use rayon::prelude::*;
    seeds.par_iter().map(|&s| run(s)).collect()
}

/// Per-epoch history as CSV rows `seed,epoch,metric,value`.
pub fn history_csv(seed: u64, outcome: &TrainOutcome) -> String {
    let mut out = String::from("seed,epoch,metric,value\n");
    for rec in &outcome.history {
        out.push_str(&format!("{seed},{},train_loss,{}\n", rec.epoch, rec.train_loss));
        out.push_str(&format!("{seed},{},learning_rate,{}\n", rec.epoch, rec.learning_rate));
        if let Some(v) = rec.val_metric {
            out.push_str(&format!(
                "{seed},{},val_{},{}\n",
                rec.epoch, outcome.val_metric_name, v
            ));
        }
    }
    out
}
