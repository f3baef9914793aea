//! On-disk model checkpoints: a JSON manifest describing the
//! architecture and the named entries, followed by the flat parameter
//! payload as little-endian 32-bit floats.
//!
//! Layout:
//!
//! ```text
//! magic        b"MMCK"
//! version      u32 LE (currently 1)
//! manifest_len u64 LE
//! manifest     JSON, `manifest_len` bytes
//! payload      f32 LE values, entry after entry in manifest order
//! ```
//!
//! Batch-norm running statistics ride along as buffer entries; their
//! exact scalars (momentum, epsilon, batch count) live in the manifest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineModel, BaselineSpec};
use crate::error::{Error, Result};
use crate::fusion::{CentralNet, NetworkSpec};
use crate::tensor::Scalar;
use crate::train::Model;

const MAGIC: [u8; 4] = *b"MMCK";
const VERSION: u32 = 1;

/// Architecture description stored in the manifest — enough to rebuild
/// the model before the payload fills in its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelSpec {
    Central { spec: NetworkSpec },
    Baseline { spec: BaselineSpec },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EntryKind {
    /// Trainable parameter.
    Param,
    /// Non-trained state (batch-norm running statistics).
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: EntryKind,
    dims: Vec<usize>,
}

/// Batch-norm state rides in the manifest at full precision: running
/// statistics accumulate in f64 whatever the compute width, and storing
/// them as f32 would make a reloaded model evaluate slightly differently
/// from the one that was saved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BnMeta {
    name: String,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    momentum: f64,
    eps: f64,
    batches_seen: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    #[serde(flatten)]
    spec: ModelSpec,
    entries: Vec<Entry>,
    bn: Vec<BnMeta>,
}

/// The architecture a model was built from.
pub fn model_spec<T: Scalar>(model: &Model<T>) -> ModelSpec {
    match model {
        Model::Central(m) => ModelSpec::Central { spec: m.spec.clone() },
        Model::Baseline(m) => ModelSpec::Baseline { spec: m.spec.clone() },
    }
}

/// Write `model` to `path`. Values are stored as f32 regardless of the
/// model's working precision.
pub fn save<T: Scalar>(path: &Path, model: &Model<T>) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<f32> = Vec::new();
    for (name, p) in model.named_params() {
        let t = p.borrow();
        entries.push(Entry { name, kind: EntryKind::Param, dims: t.shape().to_vec() });
        payload.extend(t.data().iter().map(|v| v.as_f64() as f32));
    }
    let mut bn_meta = Vec::new();
    for (name, block) in model.named_bn() {
        let state = block.state.borrow();
        bn_meta.push(BnMeta {
            name,
            running_mean: state.running_mean.clone(),
            running_var: state.running_var.clone(),
            momentum: state.momentum,
            eps: state.eps,
            batches_seen: state.batches_seen,
        });
    }
    let manifest = Manifest { spec: model_spec(model), entries, bn: bn_meta };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Data(format!("manifest serialization failed: {e}")))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for v in payload {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Data(format!("checkpoint truncated while reading {what}")))
}

/// Read a checkpoint back into a freshly built model.
pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::Data(format!(
            "not a checkpoint file: bad magic {magic:?} (expected {MAGIC:?})"
        )));
    }
    let mut word = [0u8; 4];
    read_exact_or(&mut r, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version} (this build reads {VERSION})"
        )));
    }
    let mut len8 = [0u8; 8];
    read_exact_or(&mut r, &mut len8, "manifest length")?;
    let manifest_len = u64::from_le_bytes(len8) as usize;
    let mut json = vec![0u8; manifest_len];
    read_exact_or(&mut r, &mut json, "manifest")?;
    let manifest: Manifest = serde_json::from_slice(&json)
        .map_err(|e| Error::Data(format!("checkpoint manifest does not parse: {e}")))?;

    // The seed is irrelevant: every value is overwritten by the payload.
    let model: Model<T> = match &manifest.spec {
        ModelSpec::Central { spec } => Model::Central(CentralNet::init(spec.clone(), 0)?),
        ModelSpec::Baseline { spec } => Model::Baseline(BaselineModel::init(spec.clone(), 0)?),
    };

    let params = model.named_params();
    let bn = model.named_bn();
    let mut read_values = |dims: &[usize], what: &str| -> Result<Vec<f32>> {
        let n: usize = dims.iter().product();
        let mut bytes = vec![0u8; n * 4];
        read_exact_or(&mut r, &mut bytes, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    };

    let mut param_iter = params.iter();
    for entry in &manifest.entries {
        match entry.kind {
            EntryKind::Param => {
                let (name, p) = param_iter.next().ok_or_else(|| {
                    Error::Data(format!(
                        "checkpoint lists extra parameter {} the architecture lacks",
                        entry.name
                    ))
                })?;
                if *name != entry.name {
                    return Err(Error::Data(format!(
                        "checkpoint parameter order mismatch: found {}, expected {name}",
                        entry.name
                    )));
                }
                let mut t = p.borrow_mut();
                if t.shape() != entry.dims.as_slice() {
                    return Err(Error::Data(format!(
                        "parameter {name} has shape {:?} on disk but {:?} in the architecture",
                        entry.dims,
                        t.shape()
                    )));
                }
                let values = read_values(&entry.dims, name)?;
                for (dst, v) in t.data_mut().iter_mut().zip(values) {
                    *dst = T::from_f64(v as f64);
                }
            }
            // Buffers are legal in the format but unused by this writer;
            // skip their payload.
            EntryKind::Buffer => {
                read_values(&entry.dims, &entry.name)?;
            }
        }
    }
    if let Some((name, _)) = param_iter.next() {
        return Err(Error::Data(format!("checkpoint is missing parameter {name}")));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(Error::from)? != 0 {
        return Err(Error::Data("checkpoint has trailing bytes after the payload".into()));
    }

    // Restore batch-norm state from the manifest.
    if manifest.bn.len() != bn.len() {
        return Err(Error::Data(format!(
            "checkpoint carries {} batch-norm blocks, the architecture has {}",
            manifest.bn.len(),
            bn.len()
        )));
    }
    for ((name, block), meta) in bn.iter().zip(&manifest.bn) {
        if *name != meta.name {
            return Err(Error::Data(format!(
                "batch-norm block order mismatch: found {}, expected {name}",
                meta.name
            )));
        }
        let mut state = block.state.borrow_mut();
        if meta.running_mean.len() != state.running_mean.len()
            || meta.running_var.len() != state.running_var.len()
        {
            return Err(Error::Data(format!(
                "batch-norm block {name} has {} channels on disk but {} in the architecture",
                meta.running_mean.len(),
                state.running_mean.len()
            )));
        }
        state.running_mean = meta.running_mean.clone();
        state.running_var = meta.running_var.clone();
        state.momentum = meta.momentum;
        state.eps = meta.eps;
        state.batches_seen = meta.batches_seen;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::BaselineMethod;
    use crate::data::{Labels, MultimodalDataset};
    use crate::fusion::{FusionMode, LayerSpec, NetworkSpec, Projection, TowerSpec};
    use crate::train::{evaluate, train, TrainConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tower(input: usize, hidden: usize, n_classes: usize, batchnorm: bool) -> TowerSpec {
        let mut dense = LayerSpec::dense(hidden, 0.0);
        dense.batchnorm = batchnorm;
        TowerSpec {
            input_shape: vec![input],
            layers: vec![dense, LayerSpec::prediction(n_classes, false)],
            fusion_start: 0,
        }
    }

    fn central_spec() -> NetworkSpec {
        NetworkSpec {
            towers: vec![tower(5, 7, 4, true), tower(5, 7, 4, true)],
            central: NetworkSpec::mirrored_central(&[tower(5, 7, 4, true)]),
            n_classes: 4,
            multilabel: false,
            fusion_mode: FusionMode::Rescaled,
            projection: Projection::ZeroPad,
        }
    }

    fn dataset(n: usize, seed: u64) -> MultimodalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mods = (0..2)
            .map(|_| (0..n * 5).map(|_| rng.gen_range(-1.0..1.0f32)).collect())
            .collect();
        MultimodalDataset {
            dims: vec![5, 5],
            modalities: mods,
            labels: Labels::Classes {
                ids: (0..n).map(|i| (i % 4) as u32).collect(),
                n_classes: 4,
            },
        }
    }

    fn params_of(model: &Model<f32>) -> Vec<(String, Vec<f32>)> {
        model
            .named_params()
            .into_iter()
            .map(|(n, p)| (n, p.borrow().data().to_vec()))
            .collect()
    }

    /// Training moves parameters and batch-norm statistics; a round trip
    /// through disk must preserve all of them bitwise (f32 working
    /// precision matches the storage precision) and reproduce evaluation.
    #[test]
    fn round_trip_reproduces_a_trained_model_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let data = dataset(32, 1);
        let model = Model::Central(CentralNet::<f32>::init(central_spec(), 3).unwrap());
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            dropout_p: 0.0,
            ..TrainConfig::default()
        };
        train(&model, &data, &cfg).unwrap();
        save(&path, &model).unwrap();
        let loaded: Model<f32> = load(&path).unwrap();

        assert_eq!(params_of(&model), params_of(&loaded));
        for ((name_a, a), (name_b, b)) in model.named_bn().iter().zip(loaded.named_bn()) {
            assert_eq!(*name_a, name_b);
            assert_eq!(*a.state.borrow(), *b.state.borrow());
        }
        let before = evaluate(&model, &data, 16).unwrap();
        let after = evaluate(&loaded, &data, 16).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn round_trip_covers_baseline_architectures() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("baseline.ckpt");
        let spec = BaselineSpec {
            method: BaselineMethod::Gmu,
            towers: vec![tower(5, 7, 4, false), tower(5, 7, 4, false)],
            n_classes: 4,
            multilabel: false,
        };
        let model = Model::Baseline(BaselineModel::<f32>::init(spec, 9).unwrap());
        save(&path, &model).unwrap();
        let loaded: Model<f32> = load(&path).unwrap();
        assert_eq!(params_of(&model), params_of(&loaded));
        assert_eq!(loaded.method_name(), "gmu");
        match model_spec(&loaded) {
            ModelSpec::Baseline { spec } => assert_eq!(spec.method, BaselineMethod::Gmu),
            other => panic!("wrong spec kind: {other:?}"),
        }
    }

    #[test]
    fn corrupted_or_truncated_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::Central(CentralNet::<f32>::init(central_spec(), 3).unwrap());
        save(&path, &model).unwrap();
        let good = std::fs::read(&path).unwrap();

        // Bad magic.
        let mut bad = good.clone();
        bad[0] ^= 0xff;
        std::fs::write(&path, &bad).unwrap();
        match load::<f32>(&path) {
            Err(Error::Data(msg)) => assert!(msg.contains("magic"), "{msg}"),
            other => panic!("expected data error, got {:?}", other.map(|_| ())),
        }

        // Unsupported version.
        let mut bad = good.clone();
        bad[4] = 99;
        std::fs::write(&path, &bad).unwrap();
        match load::<f32>(&path) {
            Err(Error::Data(msg)) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("expected data error, got {:?}", other.map(|_| ())),
        }

        // Truncated payload.
        let mut bad = good.clone();
        bad.truncate(good.len() - 3);
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load::<f32>(&path), Err(Error::Data(_))));

        // Trailing garbage.
        let mut bad = good.clone();
        bad.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&path, &bad).unwrap();
        match load::<f32>(&path) {
            Err(Error::Data(msg)) => assert!(msg.contains("trailing"), "{msg}"),
            other => panic!("expected data error, got {:?}", other.map(|_| ())),
        }

        // Intact file still loads.
        std::fs::write(&path, &good).unwrap();
        assert!(load::<f32>(&path).is_ok());
    }

    #[test]
    fn sixty_four_bit_models_store_as_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::Central(CentralNet::<f64>::init(central_spec(), 3).unwrap());
        save(&path, &model).unwrap();
        let loaded: Model<f64> = load(&path).unwrap();
        for ((_, a), (_, b)) in model.named_params().iter().zip(loaded.named_params()) {
            for (x, y) in a.borrow().data().iter().zip(b.borrow().data()) {
                assert_eq!(*x as f32, *y as f32, "values must agree at storage precision");
            }
        }
    }
}
