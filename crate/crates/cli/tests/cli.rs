//! End-to-end tests of the `fusionlab` binary: dataset generation,
//! training artifacts, evaluation, configuration precedence, exit
//! codes, and sweep/train agreement.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fusionlab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

/// Run and require success, returning stdout.
fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "fusionlab {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process not killed by signal")
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// Generate a small digit corpus and a two-view dataset under `root`;
/// returns (train.mmft, test.mmft) paths. 900 samples keeps the PCA
/// well-posed (it needs at least as many samples as pixels).
fn gen_dataset(root: &Path) -> (PathBuf, PathBuf) {
    let corpus = root.join("corpus");
    let data = root.join("data");
    run_ok(&[
        "gen-digits", "--out", &s(&corpus), "--train-n", "900", "--test-n", "100", "--seed", "7",
    ]);
    run_ok(&[
        "gen-mmnist", "--corpus", &s(&corpus), "--out", &s(&data),
        "--energy", "0.6", "--share", "0.5", "--seed", "7",
    ]);
    (data.join("mmnist_train.mmft"), data.join("mmnist_test.mmft"))
}

/// Train flags shared by the artifact tests: tiny but real.
fn train_args<'a>(
    train: &'a str,
    test: &'a str,
    out_dir: &'a str,
    method: &'a str,
    runs: &'a str,
) -> Vec<&'a str> {
    vec![
        "train", "--preset", "mmnist", "--method", method,
        "--train-data", train, "--test-data", test, "--out-dir", out_dir,
        "--runs", runs, "--seed", "0", "--epochs", "1",
        "--set", "batch_size=90", "--set", "val_holdout=100",
    ]
}

#[test]
fn generation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a_train, _) = gen_dataset(&dir.path().join("a"));
    let (b_train, _) = gen_dataset(&dir.path().join("b"));
    let bytes_a = std::fs::read(&a_train).unwrap();
    let bytes_b = std::fs::read(&b_train).unwrap();
    assert_eq!(bytes_a, bytes_b, "same seeds must reproduce the dataset byte-for-byte");
    let manifest =
        std::fs::read_to_string(a_train.parent().unwrap().join("manifest.txt")).unwrap();
    for key in ["energy=", "share_ratio=", "realized_energy_a=", "basis_sha256="] {
        assert!(manifest.contains(key), "manifest is missing {key}");
    }
}

#[test]
fn train_writes_artifacts_and_eval_and_alpha_report_read_them() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = gen_dataset(dir.path());
    let out = dir.path().join("run");
    run_ok(&train_args(&s(&train), &s(&test), &s(&out), "centralnet", "2"));

    for file in ["config_resolved.txt", "history.csv", "report.csv"] {
        assert!(out.join(file).is_file(), "missing {file}");
    }
    for seed in ["seed0", "seed1"] {
        assert!(out.join(seed).join("model.ckpt").is_file(), "missing {seed} checkpoint");
        assert!(out.join(seed).join("alphas.csv").is_file(), "missing {seed} alpha report");
    }
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(report.starts_with("metric,n_runs,mean,std,ci99,values\n"));
    for metric in ["error_count", "accuracy", "f1_micro", "f1_macro"] {
        assert!(report.contains(&format!("\n{metric},2,")), "report lacks {metric} over 2 runs");
    }
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(history.starts_with("seed,epoch,metric,value\n"));
    for row in ["\n0,0,train_loss,", "\n1,0,train_loss,", "\n0,0,val_accuracy,"] {
        assert!(history.contains(row), "history lacks {row:?}");
    }

    // Evaluation prints metric,value CSV, deterministically, and the
    // optional --out copy matches stdout.
    let ckpt = out.join("seed0").join("model.ckpt");
    let eval_csv = dir.path().join("eval.csv");
    let stdout = run_ok(&[
        "eval", "--checkpoint", &s(&ckpt), "--dataset", &s(&test),
        "--batch-size", "50", "--out", &s(&eval_csv),
    ]);
    assert!(stdout.starts_with("metric,value\n"));
    assert!(stdout.contains("\naccuracy,"));
    assert_eq!(stdout, std::fs::read_to_string(&eval_csv).unwrap());
    let again = run_ok(&["eval", "--checkpoint", &s(&ckpt), "--dataset", &s(&test), "--batch-size", "50"]);
    assert_eq!(stdout, again, "evaluation must be deterministic");

    // The fusion-weight report covers every level and matches the file
    // written at training time.
    let alphas = run_ok(&["report-alphas", "--checkpoint", &s(&ckpt)]);
    assert!(alphas.starts_with("level,central,modality0,modality1,degenerate\n"));
    // Input fusion, one level per hidden layer, and the prediction sum.
    assert_eq!(alphas.lines().count(), 1 + 5, "LeNet5 stack fuses at five levels");
    assert!(alphas.lines().nth(1).unwrap().starts_with("0,,"), "level 0 has no central term");
    assert_eq!(alphas, std::fs::read_to_string(out.join("seed0").join("alphas.csv")).unwrap());
}

#[test]
fn dry_run_shows_three_layer_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    std::fs::write(&cfg, "# comment\npreset = mmnist\nlearning_rate = 0.02\nepochs = 7\n").unwrap();
    let stdout = run_ok(&[
        "train", "--config", &s(&cfg), "--dry-run",
        "--epochs", "9", "--set", "learning_rate=0.03",
    ]);
    // --set beats the file; a dedicated flag beats the file; untouched
    // keys keep the preset's defaults.
    assert!(stdout.contains("learning_rate = 0.03\n"), "--set must win:\n{stdout}");
    assert!(stdout.contains("epochs = 9\n"), "flag must beat the file:\n{stdout}");
    assert!(stdout.contains("batch_size = 128\n"), "preset default must survive:\n{stdout}");
    assert!(stdout.contains("method = centralnet\n"));

    // Without the overrides the file's values win over the preset.
    let plain = run_ok(&["train", "--config", &s(&cfg), "--dry-run"]);
    assert!(plain.contains("learning_rate = 0.02\n"));
    assert!(plain.contains("epochs = 7\n"));
}

#[test]
fn failures_map_to_documented_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = gen_dataset(dir.path());
    let (train, test) = (s(&train), s(&test));

    // Unknown configuration key: usage/config error (2).
    let out = run(&["train", "--preset", "mmnist", "--dry-run", "--set", "learning=0.1"]);
    assert_eq!(exit_code(&out), 2, "unknown key should exit 2");
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning"));

    // Missing dataset file: I/O error (3).
    let out = run(&train_args(&train, "/nonexistent/test.mmft", "/tmp/never", "concat", "1"));
    assert_eq!(exit_code(&out), 3, "missing dataset should exit 3");

    // Corrupted checkpoint: data error (3).
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"XXXX not a checkpoint").unwrap();
    let out = run(&["eval", "--checkpoint", &s(&bad), "--dataset", &test]);
    assert_eq!(exit_code(&out), 3, "corrupted checkpoint should exit 3");
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));

    // Fusion-weight report on a non-central model: config error (2).
    let concat_dir = dir.path().join("concat");
    run_ok(&train_args(&train, &test, &s(&concat_dir), "concat", "1"));
    let ckpt = concat_dir.join("seed0").join("model.ckpt");
    let out = run(&["report-alphas", "--checkpoint", &s(&ckpt)]);
    assert_eq!(exit_code(&out), 2, "alpha report is centralnet-only");
    assert!(String::from_utf8_lossy(&out.stderr).contains("concat"));

    // Exploding optimizer step: divergence (4).
    let boom = s(&dir.path().join("boom"));
    let mut args = train_args(&train, &test, &boom, "centralnet", "1");
    args.extend(["--set", "learning_rate=1e30"]);
    let out = run(&args);
    assert_eq!(exit_code(&out), 4, "non-finite loss should exit 4");
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn sweep_singleton_grid_matches_a_direct_train_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    run_ok(&[
        "gen-digits", "--out", &s(&corpus), "--train-n", "900", "--test-n", "100", "--seed", "7",
    ]);
    let sweep_dir = dir.path().join("sweep");
    let stdout = run_ok(&[
        "sweep", "--corpus-dir", &s(&corpus), "--out-dir", &s(&sweep_dir),
        "--energies", "0.6", "--shares", "0.5", "--methods", "centralnet,weighted_mean",
        "--set", "runs=2", "--set", "seed=0", "--set", "epochs=1",
        "--set", "batch_size=90", "--set", "val_holdout=100",
    ]);
    assert!(stdout.contains("1 cells x 2 methods, 0 failed runs"));

    let cell = sweep_dir.join("energy0.6_share0.5");
    let combined = std::fs::read_to_string(sweep_dir.join("combined.csv")).unwrap();
    assert!(combined.starts_with("energy,share,method,seed,metric,value\n"));
    assert_eq!(
        combined.lines().count(),
        1 + 2 * 2,
        "one row per cell x method x seed:\n{combined}"
    );
    assert!(combined.contains("\n0.6,0.5,centralnet,0,accuracy,"));
    assert!(combined.contains("\n0.6,0.5,weighted_mean,1,accuracy,"));
    let errors = std::fs::read_to_string(sweep_dir.join("errors.csv")).unwrap();
    assert_eq!(errors, "energy,share,method,error\n");

    // A direct train run on the sweep cell's dataset reproduces the
    // sweep's per-method artifacts byte-for-byte.
    let train = cell.join("data").join("mmnist_train.mmft");
    let test = cell.join("data").join("mmnist_test.mmft");
    let direct = dir.path().join("direct");
    run_ok(&train_args(&s(&train), &s(&test), &s(&direct), "centralnet", "2"));
    for file in ["report.csv", "history.csv"] {
        let sweep_bytes = std::fs::read(cell.join("centralnet").join(file)).unwrap();
        let direct_bytes = std::fs::read(direct.join(file)).unwrap();
        assert_eq!(sweep_bytes, direct_bytes, "{file} differs between sweep and train");
    }
    let sweep_ckpt = std::fs::read(cell.join("centralnet/seed1/model.ckpt")).unwrap();
    let direct_ckpt = std::fs::read(direct.join("seed1/model.ckpt")).unwrap();
    assert_eq!(sweep_ckpt, direct_ckpt, "checkpoints differ between sweep and train");
}
