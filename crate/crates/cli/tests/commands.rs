use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use floodfuse_cli::commands::{
    cmd_beta_sweep, cmd_evaluate, cmd_export_embeddings, cmd_inventory, cmd_kfold, cmd_synth_data, cmd_train, cmd_tune,
    ExportOptions, Settings, TrainOptions,
};
use floodfuse_cli::config::ExperimentConfig;
use serde_json::Value;

const TINY: &str = r#"
[dataset]
source = "synthetic"

[dataset.synthetic]
count = 12
size = 64

[backbone]
embed_dim = 32
depth = 4
num_heads = 2
patch_size = 16
adapter_bottleneck = 8

[cnn]
widths = [16, 16, 32, 32]

[decoder]
channels = 16
ppm_scales = [1, 2, 4]

[training]
batch_size = 4
max_epochs = 1

[tuner]
n_trials = 2
trial_epochs = 1
trial_patience = 1

[output]
name = "tiny"
"#;

fn setup(text: &str) -> (tempfile::TempDir, PathBuf, Settings) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, text).unwrap();
    let settings = Settings {
        output_root: Some(dir.path().join("runs")),
        args: vec!["test".into()],
    };
    (dir, cfg, settings)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> usize {
    csv::Reader::from_path(path).unwrap().records().count()
}

#[test]
fn train_writes_a_complete_run_directory() {
    let (_tmp, cfg, settings) = setup(TINY);
    let run = cmd_train(&cfg, &TrainOptions::default(), &settings).unwrap();
    assert!(run.file_name().unwrap().to_str().unwrap().starts_with("tiny-train-"));
    for f in ["config.toml", "manifest.json", "metrics.csv", "report.json", "per_image.csv", "model.ckpt", "loss.svg", "miou.svg"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    assert!(run.join("checkpoint/last.ckpt").exists());

    let report = json(&run.join("report.json"));
    for key in ["miou", "mdice", "iou_per_class"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    assert_eq!(report["iou_per_class"].as_array().unwrap().len(), 2);

    let snapshot = ExperimentConfig::parse(&fs::read_to_string(run.join("config.toml")).unwrap(), &cfg).unwrap();
    let manifest = json(&run.join("manifest.json"));
    assert_eq!(manifest["config_hash"], snapshot.hash());
    assert_eq!(manifest["seed"], 42);
    assert_eq!(csv_rows(&run.join("metrics.csv")), 1);

    let eval = cmd_evaluate(&cfg, &run.join("model.ckpt"), "test", &settings).unwrap();
    let er = json(&eval.join("report.json"));
    assert_eq!(er["miou"], report["miou"]);
}

#[test]
fn identical_runs_write_identical_tables() {
    let (_tmp, cfg, settings) = setup(TINY);
    let a = cmd_train(&cfg, &TrainOptions::default(), &settings).unwrap();
    let b = cmd_train(&cfg, &TrainOptions::default(), &settings).unwrap();
    assert_ne!(a, b);
    for f in ["metrics.csv", "per_image.csv", "report.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let other = cmd_train(&cfg, &TrainOptions { seed: Some(7), resume: None }, &settings).unwrap();
    assert_ne!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(other.join("metrics.csv")).unwrap());
}

#[test]
fn resume_requires_the_recorded_configuration() {
    let (_tmp, cfg, settings) = setup(TINY);
    let run = cmd_train(&cfg, &TrainOptions::default(), &settings).unwrap();
    let resumed = cmd_train(&cfg, &TrainOptions { seed: None, resume: Some(run.clone()) }, &settings).unwrap();
    assert_eq!(resumed, run);

    fs::write(&cfg, TINY.replace("max_epochs = 1", "max_epochs = 2")).unwrap();
    let e = cmd_train(&cfg, &TrainOptions { seed: None, resume: Some(run) }, &settings).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn single_beta_gives_one_row() {
    let (_tmp, cfg, settings) = setup(TINY);
    let run = cmd_beta_sweep(&cfg, &[0.7], &settings).unwrap();
    assert_eq!(csv_rows(&run.join("beta_sweep.csv")), 1);
    assert!(cmd_beta_sweep(&cfg, &[1.5], &settings).is_err());
}

#[test]
fn kfold_writes_one_report_per_fold() {
    let (_tmp, cfg, settings) = setup(&TINY.replace("count = 12", "count = 20"));
    let run = cmd_kfold(&cfg, 4, &settings).unwrap();
    for i in 0..4 {
        assert!(run.join(format!("fold_{i}/report.json")).exists());
    }
    assert_eq!(csv_rows(&run.join("kfold.csv")), 4);
    let agg = json(&run.join("aggregate.json"));
    assert_eq!(agg["folds"].as_array().unwrap().len(), 4);
    assert!(agg["miou_std"].as_f64().unwrap() >= 0.0);
    let pooled = agg["per_image_miou"].as_array().unwrap();
    let test_total: u64 = agg["folds"].as_array().unwrap().iter().map(|f| f["test"].as_u64().unwrap()).sum();
    assert_eq!(pooled.len() as u64, test_total);
}

#[test]
fn tune_records_every_trial() {
    let (_tmp, cfg, settings) = setup(TINY);
    let run = cmd_tune(&cfg, &settings).unwrap();
    assert_eq!(csv_rows(&run.join("trials.csv")), 2);
    ExperimentConfig::load(&run.join("best_config.toml")).unwrap();
}

#[test]
fn native_tiles_round_trip_through_training() {
    let (tmp, cfg, settings) = setup(TINY);
    let data = tmp.path().join("tiles");
    cmd_synth_data(&cfg, &data).unwrap();
    assert!(data.join("splits.json").exists());
    let native = TINY.replace("source = \"synthetic\"", "source = \"native\"\npath = \"tiles\"");
    fs::write(&cfg, native).unwrap();
    let run = cmd_train(&cfg, &TrainOptions::default(), &settings).unwrap();
    assert!(json(&run.join("report.json"))["miou"].is_number());
}

#[test]
fn inventory_counts_adapters() {
    let (tmp, cfg, _) = setup(TINY);
    let out = tmp.path().join("inv");
    let report = cmd_inventory(&cfg, Some(&out)).unwrap();
    assert_eq!(report.adapter_params_per_block, 2 * 32 * 8 + 8 + 32);
    assert_eq!(report.adapter_blocks, 4);
    assert!(out.join("inventory.json").exists());
}

#[test]
fn embeddings_cover_every_stage_and_level() {
    let (_tmp, cfg, settings) = setup(TINY);
    let run = cmd_export_embeddings(&cfg, &ExportOptions::default(), &settings).unwrap();
    let index = json(&run.join("embeddings.json"));
    let entries = index.as_array().unwrap();
    assert_eq!(entries.len(), 12);
    for e in entries {
        assert!(Path::new(e["png"].as_str().unwrap()).exists());
        assert!(Path::new(e["features"].as_str().unwrap()).exists());
    }
}

fn floodfuse(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_floodfuse"))
        .args(args)
        .env("FLOODFUSE_OUTPUT", out)
        .output()
        .unwrap()
}

#[test]
fn configuration_errors_exit_with_two() {
    let (tmp, cfg, _) = setup(&TINY.replace("source = \"synthetic\"", "source = \"sen1floods11\"\npath = \"missing\""));
    let o = floodfuse(&["train", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing"));

    fs::write(&cfg, TINY.replace("[training]", "[training]\nlearning_rate = 0.1")).unwrap();
    assert_eq!(floodfuse(&["train", cfg.to_str().unwrap()], tmp.path()).status.code(), Some(2));
    assert_eq!(floodfuse(&["no-such-command"], tmp.path()).status.code(), Some(2));

    let bad = floodfuse(&["inventory", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(bad.status.code(), Some(2), "the unknown key also fails inventory");
    fs::write(&cfg, TINY).unwrap();
    let ok = floodfuse(&["inventory", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("adapter parameters per block: 552"));
}
