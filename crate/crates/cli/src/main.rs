//! `fusionlab` — generate controllable two-view digit datasets, train
//! multimodal fusion models (a central fusion network plus the standard
//! baselines), evaluate checkpoints, and sweep the generator grid.

mod commands;
mod config;

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fusionlab_core::error::Result;

#[derive(Parser)]
#[command(
    name = "fusionlab",
    about = "Multimodal fusion training laboratory",
    version,
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic digit corpus (IDX files) used as raw input.
    GenDigits {
        /// Directory for the IDX files.
        #[arg(long)]
        out: PathBuf,
        /// Training images to generate.
        #[arg(long, default_value_t = 12000)]
        train_n: usize,
        /// Test images to generate.
        #[arg(long, default_value_t = 2000)]
        test_n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Split a digit corpus into a two-view dataset by principal components.
    GenMmnist {
        /// Directory holding the IDX digit corpus.
        #[arg(long)]
        corpus: PathBuf,
        /// Directory for the rendered two-view dataset.
        #[arg(long)]
        out: PathBuf,
        /// Fraction of spectral energy kept across both views (0, 1].
        #[arg(long, default_value_t = 0.5)]
        energy: f64,
        /// First view's share of the kept energy (0, 1).
        #[arg(long, default_value_t = 0.5)]
        share: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one method for one or more seeds and write reports.
    Train {
        #[command(flatten)]
        experiment: ExperimentArgs,
        /// Resolve and print the configuration without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate a checkpoint on a dataset and print metric,value CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file (.mmft) to evaluate on.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a centralnet checkpoint's fusion weights per level as CSV.
    ReportAlphas {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate the two-view dataset over an energy x share grid and
    /// train every requested method on every cell.
    Sweep {
        /// Optional key = value configuration file applied to every run.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding the IDX digit corpus.
        #[arg(long)]
        corpus_dir: PathBuf,
        /// Root directory for cell datasets, per-run artifacts, and the
        /// combined CSV.
        #[arg(long)]
        out_dir: PathBuf,
        /// Energy grid values, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        energies: Vec<String>,
        /// Share grid values, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        shares: Vec<String>,
        /// Methods to train per cell, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
        /// Extra configuration overrides as KEY=VALUE.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

/// Configuration sources for `train`: an optional file, common flags,
/// and generic `--set` overrides. Precedence: preset defaults, then the
/// file, then flags, then `--set`.
#[derive(Args)]
struct ExperimentArgs {
    /// Optional key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset preset naming the architecture and training defaults.
    #[arg(long)]
    preset: Option<String>,
    /// Fusion method to train.
    #[arg(long)]
    method: Option<String>,
    /// Training dataset file (.mmft).
    #[arg(long)]
    train_data: Option<PathBuf>,
    /// Test dataset file (.mmft).
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Directory for checkpoints and reports.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Independent training runs (seeds base..base+runs).
    #[arg(long)]
    runs: Option<usize>,
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs per run.
    #[arg(long)]
    epochs: Option<usize>,
    /// Extra configuration overrides as KEY=VALUE.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ExperimentArgs {
    /// Flatten the sugar flags and `--set` pairs into one override map;
    /// `--set` entries win over the dedicated flags.
    fn overrides(&self) -> Result<BTreeMap<String, String>> {
        let mut map = BTreeMap::new();
        let mut put = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                map.insert(key.to_string(), v);
            }
        };
        put("preset", self.preset.clone());
        put("method", self.method.clone());
        put("train_data", self.train_data.as_ref().map(|p| p.display().to_string()));
        put("test_data", self.test_data.as_ref().map(|p| p.display().to_string()));
        put("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string()));
        put("runs", self.runs.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        map.extend(config::parse_overrides(&self.set)?);
        Ok(map)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDigits { out, train_n, test_n, seed } => {
            commands::cmd_gen_digits(&out, train_n, test_n, seed)
        }
        Command::GenMmnist { corpus, out, energy, share, seed } => {
            commands::cmd_gen_mmnist(&corpus, &out, energy, share, seed)
        }
        Command::Train { experiment, dry_run } => {
            let overrides = experiment.overrides()?;
            commands::cmd_train(experiment.config.as_deref(), &overrides, dry_run)
        }
        Command::Eval { checkpoint, dataset, batch_size, out } => {
            commands::cmd_eval(&checkpoint, &dataset, batch_size, out.as_deref())
        }
        Command::ReportAlphas { checkpoint, out } => {
            commands::cmd_report_alphas(&checkpoint, out.as_deref())
        }
        Command::Sweep { config, corpus_dir, out_dir, energies, shares, methods, set } => {
            let overrides = config::parse_overrides(&set)?;
            commands::cmd_sweep(
                config.as_deref(),
                &overrides,
                &corpus_dir,
                &out_dir,
                &energies,
                &shares,
                &methods,
            )
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
