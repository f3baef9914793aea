//! Experiment configuration: plain-text `key = value` files, dataset
//! presets carrying the published hyperparameters, and a strict
//! three-layer precedence — command-line overrides beat config-file
//! values, which beat preset defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fusionlab_core::baselines::{BaselineMethod, BaselineSpec, Combiner};
use fusionlab_core::checkpoint::ModelSpec;
use fusionlab_core::error::{Error, Result};
use fusionlab_core::fusion::{presets, FusionMode, NetworkSpec};
use fusionlab_core::train::{LossKind, TrainConfig};

/// Every key the configuration system understands.
const KNOWN_KEYS: &[&str] = &[
    "preset",
    "method",
    "modality",
    "depth_layer",
    "combiner",
    "fusion_mode",
    "train_data",
    "test_data",
    "out_dir",
    "runs",
    "seed",
    "learning_rate",
    "lr_decay",
    "batch_size",
    "epochs",
    "dropout",
    "moddrop_p",
    "beta",
    "loss",
    "early_stopping",
    "patience",
    "balanced_batches",
    "val_holdout",
    "first_dense_width",
];

const METHODS: &[&str] = &[
    "centralnet",
    "unimodal",
    "weighted_mean",
    "concat",
    "concat_multitask",
    "moddrop",
    "gmu",
    "depth_fusion",
    "ensemble",
    "fusion_plus_ensemble",
];

pub const PRESETS: &[&str] =
    &["mmnist", "avmnist-features", "montalbano-features", "mmimdb-features"];

/// A fully resolved experiment: which dataset preset and method to run,
/// where the data lives, and the training hyperparameters.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub preset: String,
    pub method: String,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub runs: usize,
    pub train: TrainConfig,
    pub modality: usize,
    pub depth_layer: usize,
    pub combiner: Combiner,
    pub fusion_mode: FusionMode,
    pub first_dense_width: usize,
    /// The merged key map the typed fields were read from, for echoing.
    pub resolved: BTreeMap<String, String>,
}

/// Parse one `key = value` file. `#` starts a comment line; blank lines
/// are skipped; later duplicates of a key win.
pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read config file {}: {e}", path.display()))
    })?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{}:{}: expected `key = value`, got `{raw}`",
                path.display(),
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!(
                "{}:{}: unknown key `{key}`",
                path.display(),
                lineno + 1
            )));
        }
        map.insert(key, value);
    }
    Ok(map)
}

/// Parse `key=value` override strings (from `--set` and sugar flags).
pub fn parse_overrides(pairs: &[String]) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for pair in pairs {
        let Some((key, value)) = pair.split_once('=') else {
            return Err(Error::Config(format!("override `{pair}` is not of the form key=value")));
        };
        let key = key.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown override key `{key}`")));
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

/// Hyperparameter defaults of one dataset preset under one method. The
/// returned map is the bottom precedence layer.
fn preset_defaults(preset: &str, method: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    let mut set = |k: &str, v: &str| {
        map.insert(k.to_string(), v.to_string());
    };
    // Method-independent defaults shared by every preset.
    set("runs", "1");
    set("seed", "0");
    set("lr_decay", "1");
    set("epochs", "100");
    set("beta", "");
    set("early_stopping", "false");
    set("patience", "10");
    set("balanced_batches", "false");
    set("fusion_mode", "plain");
    set("modality", "0");
    set("depth_layer", "2");
    set("combiner", "sum");
    set("loss", "softmax_ce");
    set("first_dense_width", "2048");
    match preset {
        "mmnist" => {
            set("learning_rate", "0.01");
            set("batch_size", "128");
            set("dropout", "0.5");
            set("val_holdout", "5000");
            set("moddrop_p", "0.2");
            if method == "moddrop" {
                set("learning_rate", "0.05");
            }
            if method == "gmu" {
                set("dropout", "0.25");
            }
        }
        "avmnist-features" => {
            set("learning_rate", "0.001");
            set("batch_size", "128");
            set("dropout", "0.5");
            set("val_holdout", "5000");
            set("moddrop_p", "0.32");
            if method == "moddrop" {
                set("learning_rate", "0.005");
            }
            if method == "gmu" {
                set("dropout", "0.35");
            }
        }
        "montalbano-features" => {
            set("learning_rate", "0.05");
            set("lr_decay", "0.96");
            set("batch_size", "42");
            set("balanced_batches", "true");
            set("dropout", "0.5");
            set("val_holdout", "0");
            set("moddrop_p", "0.5");
        }
        "mmimdb-features" => {
            set("learning_rate", "0.01");
            set("batch_size", "128");
            set("dropout", "0.5");
            set("loss", "weighted_bce");
            set("early_stopping", "true");
            set("val_holdout", "5000");
            set("moddrop_p", "0.25");
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            )));
        }
    }
    Ok(map)
}

fn parse_typed<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = map
        .get(key)
        .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))?;
    raw.parse().map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{raw}`")))
}

fn parse_bool(map: &BTreeMap<String, String>, key: &str) -> Result<bool> {
    let raw = map
        .get(key)
        .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))?;
    match raw.as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("key `{key}`: expected true/false, got `{other}`"))),
    }
}

pub fn parse_f64_list(raw: &str) -> Result<Vec<f64>> {
    if raw.trim().is_empty() {
        return Ok(vec![]);
    }
    raw.split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("cannot parse `{part}` as a number")))
        })
        .collect()
}

/// Merge the three layers (preset defaults ← config file ← overrides) and
/// parse the result into a typed configuration.
pub fn resolve(
    file: Option<&Path>,
    overrides: &BTreeMap<String, String>,
) -> Result<ExperimentConfig> {
    let file_map = match file {
        Some(path) => parse_config_file(path)?,
        None => BTreeMap::new(),
    };
    let pick = |key: &str| overrides.get(key).or_else(|| file_map.get(key));
    let preset = pick("preset")
        .cloned()
        .ok_or_else(|| Error::Config("no `preset` given (config file or --preset)".into()))?;
    let method = pick("method").cloned().unwrap_or_else(|| "centralnet".to_string());
    if !METHODS.contains(&method.as_str()) {
        return Err(Error::Config(format!(
            "unknown method `{method}` (expected one of {})",
            METHODS.join(", ")
        )));
    }

    let mut merged = preset_defaults(&preset, &method)?;
    merged.extend(file_map);
    merged.extend(overrides.clone());
    merged.insert("preset".into(), preset.clone());
    merged.insert("method".into(), method.clone());

    let loss = match merged.get("loss").map(String::as_str) {
        Some("softmax_ce") => LossKind::SoftmaxCe,
        Some("weighted_bce") => LossKind::WeightedBce,
        Some(other) => {
            return Err(Error::Config(format!(
                "key `loss`: expected softmax_ce or weighted_bce, got `{other}`"
            )));
        }
        None => LossKind::SoftmaxCe,
    };
    let combiner = match merged.get("combiner").map(String::as_str) {
        Some("sum") | None => Combiner::Sum,
        Some("prod") => Combiner::Prod,
        Some("subtract") => Combiner::Subtract,
        Some(other) => {
            return Err(Error::Config(format!(
                "key `combiner`: expected sum, prod, or subtract, got `{other}`"
            )));
        }
    };
    let fusion_mode = match merged.get("fusion_mode").map(String::as_str) {
        Some("plain") | None => FusionMode::Plain,
        Some("rescaled") => FusionMode::Rescaled,
        Some(other) => {
            return Err(Error::Config(format!(
                "key `fusion_mode`: expected plain or rescaled, got `{other}`"
            )));
        }
    };

    let train = TrainConfig {
        learning_rate: parse_typed(&merged, "learning_rate")?,
        lr_decay_per_epoch: parse_typed(&merged, "lr_decay")?,
        batch_size: parse_typed(&merged, "batch_size")?,
        epochs: parse_typed(&merged, "epochs")?,
        dropout_p: parse_typed(&merged, "dropout")?,
        beta: parse_f64_list(merged.get("beta").map(String::as_str).unwrap_or(""))?,
        moddrop_p: parse_typed(&merged, "moddrop_p")?,
        seed: parse_typed(&merged, "seed")?,
        early_stopping: parse_bool(&merged, "early_stopping")?,
        patience: parse_typed(&merged, "patience")?,
        loss,
        balanced_batches: parse_bool(&merged, "balanced_batches")?,
        val_holdout: parse_typed(&merged, "val_holdout")?,
    };
    train.validate()?;

    let runs: usize = parse_typed(&merged, "runs")?;
    if runs == 0 {
        return Err(Error::Config("`runs` must be at least 1".into()));
    }

    let cfg = ExperimentConfig {
        preset,
        method,
        train_data: merged.get("train_data").map(PathBuf::from),
        test_data: merged.get("test_data").map(PathBuf::from),
        out_dir: merged.get("out_dir").map(PathBuf::from),
        runs,
        train,
        modality: parse_typed(&merged, "modality")?,
        depth_layer: parse_typed(&merged, "depth_layer")?,
        combiner,
        fusion_mode,
        first_dense_width: parse_typed(&merged, "first_dense_width")?,
        resolved: merged,
    };
    // Building the model spec validates method/preset compatibility early.
    build_model_spec(&cfg)?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn require_train_data(&self) -> Result<&Path> {
        self.train_data
            .as_deref()
            .ok_or_else(|| Error::Config("missing required key `train_data`".into()))
    }

    pub fn require_test_data(&self) -> Result<&Path> {
        self.test_data
            .as_deref()
            .ok_or_else(|| Error::Config("missing required key `test_data`".into()))
    }

    pub fn require_out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| Error::Config("missing required key `out_dir`".into()))
    }

    /// The merged configuration as deterministic `key = value` text.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.resolved {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

/// The network layout of one preset, with this experiment's dropout and
/// fusion mode baked in.
pub fn network_for(cfg: &ExperimentConfig) -> Result<NetworkSpec> {
    let p = cfg.train.dropout_p;
    match cfg.preset.as_str() {
        "mmnist" => Ok(presets::mmnist_network(p, cfg.fusion_mode)),
        "avmnist-features" => Ok(presets::avmnist_network(p, cfg.fusion_mode)),
        "montalbano-features" => Ok(presets::montalbano_network(p, cfg.fusion_mode)),
        "mmimdb-features" => {
            Ok(presets::mmimdb_network(cfg.first_dense_width, p, cfg.fusion_mode))
        }
        other => Err(Error::Config(format!("unknown preset `{other}`"))),
    }
}

/// Method + preset → the architecture to build and checkpoint.
pub fn build_model_spec(cfg: &ExperimentConfig) -> Result<ModelSpec> {
    let net = network_for(cfg)?;
    if cfg.method == "centralnet" {
        net.validate()?;
        return Ok(ModelSpec::Central { spec: net });
    }
    let method = match cfg.method.as_str() {
        "unimodal" => BaselineMethod::Unimodal { modality: cfg.modality },
        "weighted_mean" => BaselineMethod::WeightedMean,
        "concat" => BaselineMethod::Concat,
        "concat_multitask" => BaselineMethod::ConcatMultitask,
        "moddrop" => BaselineMethod::ModDrop { p_drop: cfg.train.moddrop_p },
        "gmu" => BaselineMethod::Gmu,
        "depth_fusion" => {
            BaselineMethod::DepthFusion { layer: cfg.depth_layer, combiner: cfg.combiner }
        }
        "ensemble" => BaselineMethod::Ensemble { members: net.towers.len() },
        "fusion_plus_ensemble" => BaselineMethod::FusionPlusEnsemble {
            layer: cfg.depth_layer,
            combiner: cfg.combiner,
        },
        other => return Err(Error::Config(format!("unknown method `{other}`"))),
    };
    let spec = BaselineSpec {
        method,
        towers: net.towers,
        n_classes: net.n_classes,
        multilabel: net.multilabel,
    };
    spec.validate()?;
    Ok(ModelSpec::Baseline { spec })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn overrides(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn flags_beat_file_beats_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.conf");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "# comment\npreset = mmnist\nlearning_rate = 0.02\nepochs = 7").unwrap();
        drop(f);

        // Preset layer only.
        let base = resolve(None, &overrides(&[("preset", "mmnist")])).unwrap();
        assert_eq!(base.train.learning_rate, 0.01);
        assert_eq!(base.train.epochs, 100);

        // File overrides the preset.
        let filed = resolve(Some(&path), &BTreeMap::new()).unwrap();
        assert_eq!(filed.train.learning_rate, 0.02);
        assert_eq!(filed.train.epochs, 7);

        // Flags override the file.
        let flagged =
            resolve(Some(&path), &overrides(&[("learning_rate", "0.03")])).unwrap();
        assert_eq!(flagged.train.learning_rate, 0.03);
        assert_eq!(flagged.train.epochs, 7, "untouched file values survive");
        assert_eq!(flagged.resolved["learning_rate"], "0.03");
    }

    #[test]
    fn method_specific_preset_defaults_apply() {
        let moddrop =
            resolve(None, &overrides(&[("preset", "mmnist"), ("method", "moddrop")])).unwrap();
        assert_eq!(moddrop.train.learning_rate, 0.05);
        assert_eq!(moddrop.train.moddrop_p, 0.2);
        let gmu =
            resolve(None, &overrides(&[("preset", "mmnist"), ("method", "gmu")])).unwrap();
        assert_eq!(gmu.train.dropout_p, 0.25);
        let balanced = resolve(None, &overrides(&[("preset", "montalbano-features")])).unwrap();
        assert!(balanced.train.balanced_batches);
        assert_eq!(balanced.train.batch_size, 42);
        assert_eq!(balanced.train.lr_decay_per_epoch, 0.96);
        let imdb = resolve(None, &overrides(&[("preset", "mmimdb-features")])).unwrap();
        assert_eq!(imdb.train.loss, LossKind::WeightedBce);
        assert!(imdb.train.early_stopping);
    }

    #[test]
    fn unknown_keys_methods_and_presets_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        std::fs::write(&path, "preset = mmnist\nlerning_rate = 0.1\n").unwrap();
        assert!(matches!(resolve(Some(&path), &BTreeMap::new()), Err(Error::Config(_))));

        assert!(matches!(
            resolve(None, &overrides(&[("preset", "mnist")])),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            resolve(None, &overrides(&[("preset", "mmnist"), ("method", "super_fusion")])),
            Err(Error::Config(_))
        ));
        assert!(matches!(resolve(None, &BTreeMap::new()), Err(Error::Config(_))));
        assert!(parse_overrides(&["no_equals_sign".into()]).is_err());
    }

    #[test]
    fn model_specs_cover_every_method() {
        for method in METHODS {
            let cfg = resolve(
                None,
                &overrides(&[("preset", "mmnist"), ("method", method), ("depth_layer", "2")]),
            )
            .unwrap_or_else(|e| panic!("method {method}: {e}"));
            let spec = build_model_spec(&cfg).unwrap();
            match (*method, &spec) {
                ("centralnet", ModelSpec::Central { .. }) => {}
                ("centralnet", _) => panic!("centralnet must build a central spec"),
                (_, ModelSpec::Baseline { spec }) => assert_eq!(spec.method.name(), *method),
                (m, _) => panic!("method {m} built the wrong spec kind"),
            }
        }
    }
}
