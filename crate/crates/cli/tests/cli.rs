use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vqunet::harness::{synthetic_dataset, AttackGrid, RunManifest};
use vqunet::{AttackFamily, ClassifierConfig, RunConfig, VqUnetConfig};

const REPORTS: [&str; 4] = [
    "accuracy.csv",
    "code_churn.csv",
    "reconstruction_divergence.csv",
    "feature_divergence.csv",
];

fn vqunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqunet")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = vqunet(args);
    assert!(
        out.status.success(),
        "vqunet {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset.train_size = 40;
    cfg.dataset.test_size = 16;
    cfg.dataset.num_classes = 2;
    cfg.purifier = VqUnetConfig {
        depth: 2,
        stem_channels: 4,
        channels: vec![4, 8],
        codebook_k: vec![8, 8],
        epochs: 1,
        batch_size: 16,
        ..VqUnetConfig::default()
    };
    cfg.classifier = ClassifierConfig {
        num_classes: 2,
        channels: vec![4, 8],
        epochs: 1,
        batch_size: 16,
        ..ClassifierConfig::default()
    };
    cfg.attacks = AttackFamily::ALL
        .iter()
        .map(|&f| AttackGrid {
            steps: 2,
            ..AttackGrid::new(f, vec![0.0, 0.1])
        })
        .collect();
    cfg.diagnostic_samples = 6;
    cfg.seed = 5;
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn idx_pair(dir: &Path, n: usize) -> (String, String) {
    let data = synthetic_dataset(n, 2, 77).unwrap();
    let mut images = vec![0, 0, 8, 3];
    for d in [n as u32, 32, 32] {
        images.extend_from_slice(&d.to_be_bytes());
    }
    images.extend(data.images.data().iter().map(|&v| (v * 255.0).round() as u8));
    let mut labels = vec![0, 0, 8, 1];
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    labels.extend(data.labels.iter().map(|&l| l as u8));
    let (ip, lp) = (dir.join("images.idx"), dir.join("labels.idx"));
    fs::write(&ip, images).unwrap();
    fs::write(&lp, labels).unwrap();
    (ip.to_str().unwrap().to_string(), lp.to_str().unwrap().to_string())
}

#[test]
fn default_config_round_trips() {
    let out = ok(&["default-config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(RunConfig::from_json(&text).unwrap(), RunConfig::default());
}

#[test]
fn full_run_writes_reports_checkpoints_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny());
    let out = dir.path().join("run");
    ok(&["full-run", "--config", &config, "--out", out.to_str().unwrap(), "--seed", "11"]);
    for f in REPORTS {
        let text = fs::read_to_string(out.join(f)).unwrap();
        assert!(text.lines().count() > 1, "{f} is empty");
    }
    for f in [
        "purifier.ckpt",
        "ablation_purifier.ckpt",
        "undefended_classifier.ckpt",
        "defended_classifier.ckpt",
        "ablation_classifier.ckpt",
        "surrogate_classifier.ckpt",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest.config.seed, 11);
    assert_eq!(manifest.config.output_dir, out);
    assert!(!manifest.version.is_empty());
    assert!(!manifest.stage_seeds.is_empty());
}

#[test]
fn staged_commands_reproduce_the_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny());
    let full = dir.path().join("full");
    let staged = dir.path().join("staged");
    let (full_s, staged_s) = (full.to_str().unwrap(), staged.to_str().unwrap());
    ok(&["full-run", "--config", &config, "--out", full_s]);

    ok(&["train-purifier", "--config", &config, "--out", staged_s]);
    ok(&["ablation", "--config", &config, "--out", staged_s]);
    ok(&["train-classifier", "--config", &config, "--out", staged_s]);
    let purifier = staged.join("purifier.ckpt");
    ok(&[
        "train-classifier",
        "--config",
        &config,
        "--out",
        staged_s,
        "--purifier",
        purifier.to_str().unwrap(),
    ]);
    ok(&["train-classifier", "--config", &config, "--out", staged_s, "--surrogate"]);
    ok(&["evaluate", "--config", &config, "--out", staged_s]);

    for f in REPORTS {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(staged.join(f)).unwrap(), "{f}");
    }
    for f in ["purifier.ckpt", "defended_classifier.ckpt", "surrogate_classifier.ckpt"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(staged.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn idx_flags_select_the_idx_loader() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = idx_pair(dir.path(), 56);
    let config = write_config(dir.path(), &tiny());
    let out = dir.path().join("idx");
    ok(&[
        "train-classifier",
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
        "--idx-images",
        &images,
        "--idx-labels",
        &labels,
    ]);
    assert!(out.join("undefended_classifier.ckpt").is_file());

    // Not enough rows for the requested splits.
    let mut big = tiny();
    big.dataset.train_size = 50;
    let config = write_config(dir.path(), &big);
    let res = vqunet(&[
        "train-purifier",
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
        "--dataset",
        "idx",
        "--idx-images",
        &images,
        "--idx-labels",
        &labels,
    ]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("IDX file holds 56"));
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();

    let unknown = dir.path().join("unknown.json");
    fs::write(&unknown, r#"{"seed": 1, "learning_rate": 0.1}"#).unwrap();
    let res = vqunet(&["full-run", "--config", unknown.to_str().unwrap(), "--out", out]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("learning_rate"));

    let res = vqunet(&["train-purifier", "--dataset", "idx", "--out", out]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).to_lowercase().contains("idx"));

    // --idx-images without --idx-labels is a usage error.
    let res = vqunet(&["train-purifier", "--idx-images", "x", "--out", out]);
    assert_eq!(res.status.code(), Some(2));

    let res = vqunet(&["evaluate", "--out", out]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("loading models"));
}
