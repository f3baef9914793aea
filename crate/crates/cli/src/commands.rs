//! The work behind each subcommand: dataset generation, training runs
//! with reports, checkpoint evaluation, grid sweeps, and fusion-weight
//! reporting.

use std::collections::BTreeMap;
use std::path::Path;

use fusionlab_core::baselines::BaselineModel;
use fusionlab_core::checkpoint::{self, ModelSpec};
use fusionlab_core::data::{read_mmft, synth, MultimodalDataset};
use fusionlab_core::error::{Error, Result};
use fusionlab_core::fusion::{AlphaLevelReport, CentralNet};
use fusionlab_core::mmnist::{self, MMnistConfig};
use fusionlab_core::train::metrics::MetricSet;
use fusionlab_core::train::stats::{aggregate_runs, reports_to_csv, RunReport};
use fusionlab_core::train::{evaluate, run_seeds, train, Model, TrainOutcome};

use crate::config::{self, build_model_spec, ExperimentConfig};

pub fn cmd_gen_digits(out: &Path, train_n: usize, test_n: usize, seed: u64) -> Result<()> {
    synth::generate_digit_corpus(out, train_n, test_n, seed)?;
    println!(
        "wrote digit corpus: {} train / {} test samples under {}",
        train_n,
        test_n,
        out.display()
    );
    Ok(())
}

pub fn cmd_gen_mmnist(
    corpus: &Path,
    out: &Path,
    energy: f64,
    share: f64,
    seed: u64,
) -> Result<()> {
    let cfg = MMnistConfig { energy, share_ratio: share, seed, n_modalities: 2 };
    let summary = mmnist::generate(&cfg, corpus, out)?;
    println!(
        "wrote {} train / {} test samples to {} and {}",
        summary.n_train,
        summary.n_test,
        summary.train_path.display(),
        summary.test_path.display()
    );
    println!(
        "realized energy: ({:.4}, {:.4})  realized share: ({:.4}, {:.4})",
        summary.realized_energy.0,
        summary.realized_energy.1,
        summary.realized_share.0,
        summary.realized_share.1
    );
    Ok(())
}

/// Build a model of the architecture `spec` with parameter seed `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model<f32>> {
    Ok(match spec {
        ModelSpec::Central { spec } => Model::Central(CentralNet::init(spec.clone(), seed)?),
        ModelSpec::Baseline { spec } => Model::Baseline(BaselineModel::init(spec.clone(), seed)?),
    })
}

/// One seed's artifacts from a training run.
pub struct SeedResult {
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub test_metrics: MetricSet,
}

/// Metric rows of a [`MetricSet`] as `metric,value` CSV.
fn metrics_csv(metrics: &MetricSet) -> String {
    let mut out = String::from("metric,value\n");
    for (name, value) in metrics.rows() {
        out.push_str(&format!("{name},{value}\n"));
    }
    out
}

/// Fusion-weight percentages as CSV, one row per level. The central
/// column is empty at level 0 (that level has no central term yet).
fn alpha_csv(report: &[AlphaLevelReport]) -> String {
    let n_modalities = report.first().map_or(0, |r| r.modality_pct.len());
    let mut out = String::from("level,central");
    for k in 0..n_modalities {
        out.push_str(&format!(",modality{k}"));
    }
    out.push_str(",degenerate\n");
    for level in report {
        let central = level.central_pct.map(|p| p.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{central}", level.level));
        for pct in &level.modality_pct {
            out.push_str(&format!(",{pct}"));
        }
        out.push_str(&format!(",{}\n", level.degenerate));
    }
    out
}

/// Aggregate one metric across the per-seed results.
fn aggregate_metric(results: &[SeedResult], name: &str) -> Result<RunReport> {
    let values: Vec<f64> = results
        .iter()
        .map(|r| {
            r.test_metrics
                .rows()
                .into_iter()
                .find(|(n, _)| *n == name)
                .map(|(_, v)| v)
                .expect("metric rows are a fixed set")
        })
        .collect();
    aggregate_runs(name, &values)
}

/// Train `runs` seeds of the configured experiment, writing per-seed
/// checkpoints (plus fusion-weight reports for central models), the
/// combined per-epoch history, and the cross-seed test-metric report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SeedResult>> {
    let model_spec = build_model_spec(cfg)?;
    let train_data = read_mmft(cfg.require_train_data()?)?;
    let test_data = read_mmft(cfg.require_test_data()?)?;
    let out_dir = cfg.require_out_dir()?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config_resolved.txt"), cfg.resolved_text())?;

    let seeds: Vec<u64> = (0..cfg.runs as u64).map(|i| cfg.train.seed + i).collect();
    let results = run_seeds(&seeds, |seed| {
        let model = build_model(&model_spec, seed)?;
        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = seed;
        let outcome = train(&model, &train_data, &train_cfg)?;
        let test_metrics = evaluate(&model, &test_data, cfg.train.batch_size)?;
        let seed_dir = out_dir.join(format!("seed{seed}"));
        std::fs::create_dir_all(&seed_dir)?;
        checkpoint::save(&seed_dir.join("model.ckpt"), &model)?;
        if let Model::Central(net) = &model {
            std::fs::write(seed_dir.join("alphas.csv"), alpha_csv(&net.report_alphas()))?;
        }
        Ok(SeedResult { seed, outcome, test_metrics })
    })?;

    let mut history = String::from("seed,epoch,metric,value\n");
    for r in &results {
        let body = fusionlab_core::train::history_csv(r.seed, &r.outcome);
        history.push_str(body.split_once('\n').map(|(_, rest)| rest).unwrap_or(""));
    }
    std::fs::write(out_dir.join("history.csv"), history)?;

    let multilabel = test_data.is_multilabel();
    let reports: Vec<RunReport> = results[0]
        .test_metrics
        .rows()
        .iter()
        .map(|(name, _)| aggregate_metric(&results, name))
        .collect::<Result<_>>()?;
    std::fs::write(out_dir.join("report.csv"), reports_to_csv(&reports))?;

    let primary_name = if multilabel { "f1_samples" } else { "accuracy" };
    let primary = reports
        .iter()
        .find(|r| r.metric == primary_name)
        .expect("primary metric is always reported");
    match primary.ci99 {
        Some(ci) => println!(
            "{} x{} seeds: test {} {:.4} +/- {:.4} (99% CI)",
            cfg.method, cfg.runs, primary_name, primary.mean, ci
        ),
        None => println!(
            "{} x{} seeds: test {} {:.4} (single run, no interval)",
            cfg.method, cfg.runs, primary_name, primary.mean
        ),
    }
    Ok(results)
}

pub fn cmd_train(
    file: Option<&Path>,
    overrides: &BTreeMap<String, String>,
    dry_run: bool,
) -> Result<()> {
    let cfg = config::resolve(file, overrides)?;
    if dry_run {
        build_model_spec(&cfg)?;
        print!("{}", cfg.resolved_text());
        return Ok(());
    }
    run_experiment(&cfg)?;
    let out_dir = cfg.require_out_dir()?;
    println!("artifacts under {}", out_dir.display());
    Ok(())
}

pub fn cmd_eval(
    checkpoint_path: &Path,
    dataset: &Path,
    batch_size: usize,
    out: Option<&Path>,
) -> Result<()> {
    let model: Model<f32> = checkpoint::load(checkpoint_path)?;
    let data: MultimodalDataset = read_mmft(dataset)?;
    let metrics = evaluate(&model, &data, batch_size)?;
    let csv = metrics_csv(&metrics);
    print!("{csv}");
    if let Some(path) = out {
        std::fs::write(path, &csv)?;
    }
    Ok(())
}

pub fn cmd_report_alphas(checkpoint_path: &Path, out: Option<&Path>) -> Result<()> {
    let model: Model<f32> = checkpoint::load(checkpoint_path)?;
    let Model::Central(net) = &model else {
        return Err(Error::Config(format!(
            "the fusion-weight report is defined for centralnet checkpoints; \
             {} holds a `{}` model",
            checkpoint_path.display(),
            model.method_name()
        )));
    };
    let csv = alpha_csv(&net.report_alphas());
    print!("{csv}");
    if let Some(path) = out {
        std::fs::write(path, &csv)?;
    }
    Ok(())
}

fn csv_escape(text: &str) -> String {
    if text.contains([',', '"', '\n']) {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sweep(
    file: Option<&Path>,
    overrides: &BTreeMap<String, String>,
    corpus_dir: &Path,
    out_dir: &Path,
    energies: &[String],
    shares: &[String],
    methods: &[String],
) -> Result<()> {
    if energies.is_empty() || shares.is_empty() || methods.is_empty() {
        return Err(Error::Config("sweep needs non-empty energies, shares, and methods".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let parse = |raw: &String, what: &str| -> Result<f64> {
        raw.parse::<f64>()
            .map_err(|_| Error::Config(format!("cannot parse {what} value `{raw}`")))
    };

    let mut combined = String::from("energy,share,method,seed,metric,value\n");
    let mut failures = String::from("energy,share,method,error\n");
    let mut n_failures = 0usize;
    for energy_raw in energies {
        let energy = parse(energy_raw, "energy")?;
        for share_raw in shares {
            let share = parse(share_raw, "share")?;
            let cell_dir = out_dir.join(format!("energy{energy_raw}_share{share_raw}"));
            let data_dir = cell_dir.join("data");
            let gen_cfg =
                MMnistConfig { energy, share_ratio: share, seed: 0, n_modalities: 2 };
            let summary = match mmnist::generate(&gen_cfg, corpus_dir, &data_dir) {
                Ok(s) => s,
                Err(e) => {
                    // The whole cell is unusable; record it under every
                    // requested method so the failure is visible per cell.
                    for method in methods {
                        failures.push_str(&format!(
                            "{energy_raw},{share_raw},{method},{}\n",
                            csv_escape(&e.to_string())
                        ));
                        n_failures += 1;
                    }
                    continue;
                }
            };
            for method in methods {
                let mut cell_overrides = overrides.clone();
                cell_overrides.entry("preset".into()).or_insert_with(|| "mmnist".into());
                cell_overrides.insert("method".into(), method.clone());
                cell_overrides.insert(
                    "train_data".into(),
                    summary.train_path.display().to_string(),
                );
                cell_overrides
                    .insert("test_data".into(), summary.test_path.display().to_string());
                cell_overrides
                    .insert("out_dir".into(), cell_dir.join(method).display().to_string());
                let run = config::resolve(file, &cell_overrides).and_then(|cfg| {
                    let results = run_experiment(&cfg)?;
                    Ok((cfg, results))
                });
                match run {
                    Ok((cfg, results)) => {
                        let metric = if build_multilabel(&cfg) { "f1_samples" } else { "accuracy" };
                        for r in &results {
                            let value = r
                                .test_metrics
                                .rows()
                                .into_iter()
                                .find(|(n, _)| *n == metric)
                                .map(|(_, v)| v)
                                .expect("primary metric present");
                            combined.push_str(&format!(
                                "{energy_raw},{share_raw},{method},{},{metric},{value}\n",
                                r.seed
                            ));
                        }
                    }
                    Err(e) => {
                        failures.push_str(&format!(
                            "{energy_raw},{share_raw},{method},{}\n",
                            csv_escape(&e.to_string())
                        ));
                        n_failures += 1;
                    }
                }
            }
        }
    }
    std::fs::write(out_dir.join("combined.csv"), &combined)?;
    std::fs::write(out_dir.join("errors.csv"), &failures)?;
    let cells = energies.len() * shares.len();
    println!(
        "sweep finished: {} cells x {} methods, {} failed runs; combined CSV at {}",
        cells,
        methods.len(),
        n_failures,
        out_dir.join("combined.csv").display()
    );
    Ok(())
}

fn build_multilabel(cfg: &ExperimentConfig) -> bool {
    config::network_for(cfg).map(|n| n.multilabel).unwrap_or(false)
}
