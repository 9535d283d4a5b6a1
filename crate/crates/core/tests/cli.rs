use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ssldr::data::load_dataset;
use ssldr::eval::MetricReport;
use ssldr::model::{Checkpoint, Latents, ModelParams, TowerInputs};
use ssldr::train::TrainConfig;

fn ssldr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssldr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ssldr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small dataset plus a config file that keeps runs quick.
fn small_setup(dir: &Path) -> (String, String) {
    let data = dir.join("data");
    ok(&["synth", "--out", p(&data), "--drugs", "40", "--diseases", "30", "--density", "0.05", "--seed", "3"]);
    let config = dir.join("quick.toml");
    fs::write(
        &config,
        "k = 8\nencoder_hidden = 16\nmax_epochs = 4\nlearning_rate = 0.01\nembedding_dim = 16\nembedding_epochs = 2\n",
    )
    .unwrap();
    (p(&data).to_string(), p(&config).to_string())
}

#[test]
fn synth_output_loads_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["synth", "--out", p(out), "--seed", "11"]);
    }
    let ds = load_dataset(&a).unwrap();
    assert_eq!((ds.num_drugs(), ds.num_diseases()), (100, 80));
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
    let bad = ssldr(&["synth", "--out", p(&dir.path().join("c")), "--density", "1.5"]);
    assert!(!bad.status.success());
    assert_eq!(stderr(&bad).lines().count(), 1);
}

#[test]
fn cv_writes_reports_for_each_variant() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = small_setup(dir.path());
    for variant in ["ssldr", "ssldr_m", "ssldr_a"] {
        let out = dir.path().join(variant);
        ok(&["cv", "--data", &data, "--config", &config, "--folds", "3", "--variant", variant, "--out", p(&out)]);
        let report: MetricReport = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
        assert_eq!(report.folds.len(), 3);
        assert_eq!(report.variant.name(), variant);
        assert_eq!(fs::read_to_string(out.join("metrics.tsv")).unwrap().lines().count(), 1 + 3 + 2);
        let log = fs::read_to_string(out.join("train.log")).unwrap();
        assert_eq!(log.lines().filter(|l| l.starts_with("# fold ")).count(), 3);
        assert!(out.join("config.resolved").exists());
    }
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = small_setup(dir.path());
    let first = dir.path().join("first");
    ok(&["cv", "--data", &data, "--config", &config, "--folds", "3", "--seed", "4", "--out", p(&first)]);
    let resolved = first.join("config.resolved");
    let second = dir.path().join("second");
    ok(&["cv", "--config", p(&resolved), "--out", p(&second)]);
    assert_eq!(
        fs::read(first.join("metrics.json")).unwrap(),
        fs::read(second.join("metrics.json")).unwrap()
    );
}

#[test]
fn cv_reports_missing_dataset_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = ssldr(&["cv", "--data", p(&missing), "--out", p(&dir.path().join("o"))]);
    assert!(!out.status.success());
    let msg = stderr(&out);
    assert_eq!(msg.lines().count(), 1, "{msg}");
    assert!(msg.contains("nowhere"), "{msg}");
}

#[test]
fn bad_flags_are_usage_errors() {
    let out = ssldr(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!ssldr(&["cv", "--variant", "full", "--data", "x"]).status.success());
}

#[test]
fn zero_epoch_training_saves_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = small_setup(dir.path());
    let out = dir.path().join("t0");
    ok(&["train", "--data", &data, "--config", &config, "--epochs", "0", "--variant", "ssldr_m", "--seed", "6", "--out", p(&out)]);
    let ckpt = Checkpoint::load(out.join("model.ckpt")).unwrap();
    let cfg = TrainConfig {
        k: 8,
        encoder_hidden: 16,
        alpha: 0.0,
        ..TrainConfig::default()
    };
    let expected = ModelParams::init(40, 30, None, cfg.hyper(), 6).unwrap();
    assert_eq!(ckpt.params, expected);
    assert_eq!(ckpt.seed, 6);
}

#[test]
fn recommendations_match_checkpoint_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = small_setup(dir.path());
    let out = dir.path().join("model");
    ok(&["train", "--data", &data, "--config", &config, "--out", p(&out)]);
    assert!(fs::read_to_string(out.join("train.log")).unwrap().starts_with("epoch\t"));
    let ckpt_path = out.join("model.ckpt");
    let ds = load_dataset(&data).unwrap();
    let drug = ds.drug_ids[0].clone();

    let stdout = ok(&["recommend", "--data", &data, "--checkpoint", p(&ckpt_path), "--drug", &drug, "--top", "5", "--out", p(&out)]);
    let rows: Vec<&str> = stdout.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    assert_eq!(fs::read_to_string(out.join("recommendations.tsv")).unwrap(), stdout);

    let ckpt = Checkpoint::load(&ckpt_path).unwrap();
    let latents = Latents::compute(&ckpt.params, &TowerInputs::new(&ds.associations));
    for row in rows {
        let cols: Vec<&str> = row.split('\t').collect();
        let j = ds.disease_ids.iter().position(|d| d == cols[1]).unwrap();
        assert!(!ds.associations.get(0, j));
        assert_eq!(cols[2].parse::<f64>().unwrap(), latents.score(0, j));
    }

    let unknown = ssldr(&["recommend", "--data", &data, "--checkpoint", p(&ckpt_path), "--drug", "NOPE"]);
    assert!(!unknown.status.success());
    assert!(stderr(&unknown).contains("NOPE"));
}

#[test]
fn gradcheck_passes_and_catches_injected_bug() {
    assert!(ok(&["gradcheck"]).contains("max relative error"));
    ok(&["gradcheck", "--alpha", "0"]);
    ok(&["gradcheck", "--aux-raw", "--seed", "3"]);
    let bad = ssldr(&["gradcheck", "--inject-bug"]);
    assert!(!bad.status.success());
    assert!(stderr(&bad).contains("gradient check failed"));
}
