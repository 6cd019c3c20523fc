use std::path::Path;
use std::process::{Command, Output};

use attriqa::datagen::load_manifest;
use attriqa::digest::file_sha256;

const BASE: &str = r#"
seed = 3

[generate]
procedural = 10
procedural_size = 16
repeats = 3

[registry]
toy_dim = 8

[train_dist.model]
tune = "full"
[train_dist.model.vit]
patch_size = 8
d_model = 8
layers = 1
heads = 2
embed_dim = 8
mlp_ratio = 2
channels = 3
image_size = 16
prompt_mode = "none"
prompt_len = 0

[train_dist.schedule]
epochs = 1
warmup_epochs = 0
max_lr = 0.001
batch_size = 8
"#;

fn attriqa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attriqa"))
        .args(args)
        .arg("--config")
        .arg(dir.join("run.toml"))
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = attriqa(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), format!("{BASE}{extra}")).unwrap();
    dir
}

#[test]
fn ground_truth_predictions_score_perfectly() {
    let dir = setup("\n[eval]\npredictions = \"truth.csv\"\nsplit = \"all\"\n");
    ok(dir.path(), &["generate"]);
    let manifest = load_manifest(dir.path().join("data/manifest.jsonl")).unwrap();
    let mut csv = String::from("record_id,gaussian_blur,impulse_noise,contrast_scale\n");
    for r in &manifest.records {
        let s = |id: &str| r.strength_of(id.parse().unwrap());
        csv += &format!("{},{},{},{}\n", r.id(), s("gaussian_blur"), s("impulse_noise"), s("contrast_scale"));
    }
    std::fs::write(dir.path().join("truth.csv"), csv).unwrap();
    ok(dir.path(), &["eval"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["distortion"]["accuracy"], 1.0);
    assert_eq!(report["distortion"]["rmse"], 0.0);
    assert_eq!(report["distortion"]["images"], 30);
    assert!(dir.path().join("eval/resolved_config.toml").exists());
}

#[test]
fn rerunning_extract_gives_identical_bytes() {
    let dir = setup("");
    for cmd in ["generate", "build-registry", "train-dist", "extract"] {
        ok(dir.path(), &[cmd]);
    }
    ok(dir.path(), &["extract", "--out", "again"]);
    let a = file_sha256(dir.path().join("extract/probabilities.csv")).unwrap();
    let b = file_sha256(dir.path().join("again/probabilities.csv")).unwrap();
    assert_eq!(a, b);

    // the same seed reproduces the checkpoint
    ok(dir.path(), &["train-dist", "--out", "dist2"]);
    assert_eq!(
        file_sha256(dir.path().join("dist/model.ckpt")).unwrap(),
        file_sha256(dir.path().join("dist2/model.ckpt")).unwrap()
    );
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = setup("");
    // missing inputs: I/O
    assert_eq!(attriqa(dir.path(), &["extract"]).status.code(), Some(1));

    // unknown key: configuration
    std::fs::write(dir.path().join("bad.toml"), "sed = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_attriqa"))
        .args(["generate", "--config"])
        .arg(dir.path().join("bad.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    // malformed manifest line: data
    ok(dir.path(), &["generate"]);
    let path = dir.path().join("data/manifest.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, format!("{text}{{\"source_id\": 5}}\n")).unwrap();
    assert_eq!(attriqa(dir.path(), &["build-registry"]).status.code(), Some(3));
}
