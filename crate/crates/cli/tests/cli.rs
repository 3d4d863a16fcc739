//! End-to-end subcommand tests driving the built binary.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tactile-fusion"))
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        r#"
[data]
seq_len = 20

[synth]
classes = 2
train_trials = 2
test_trials = 1
samples_per_trial = 40
base_seed = 3

[model]
audio_hidden = 16
audio_feat = 8
model_dim = 16
ff_dim = 24
head_hidden = 8

[train]
epochs = 2
seeds = [0]
batch_size = 4
learning_rate = 0.001
"#,
    )
    .unwrap();
    path
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("spawn tactile-fusion")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn no_arguments_prints_usage_and_fails() {
    let out = bin().output().unwrap();
    assert!(!out.status.success());
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(text.contains("Usage"), "no usage text in: {text}");
}

#[test]
fn unknown_flag_rejected() {
    let out = bin().args(["train", "--definitely-not-a-flag"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn synth_writes_canonical_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let out = run(
        &["--config", cfg.to_str().unwrap(), "--data-root", "data", "synth"],
        tmp.path(),
    );
    assert_ok(&out, "synth");
    let trial = tmp.path().join("data/class00_trial00");
    for f in ["meta.json", "audio_internal.wav", "audio_external.wav", "proprio.csv", "align.csv"] {
        assert!(trial.join(f).exists(), "missing {f}");
    }
    assert!(trial.join("frames/000000.png").exists());
    assert!(trial.join("frames/000039.png").exists());
}

#[test]
fn ingest_canonicalizes_into_data_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    assert_ok(
        &run(&["--config", cfg.to_str().unwrap(), "--data-root", "src_data", "synth"], tmp.path()),
        "synth",
    );
    let out = run(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "--data-root",
            "data",
            "ingest",
            "--src",
            "src_data",
        ],
        tmp.path(),
    );
    assert_ok(&out, "ingest");
    assert!(tmp.path().join("data/class01_trial02/meta.json").exists());
}

#[test]
fn train_evaluate_latents_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let c = cfg.to_str().unwrap();
    assert_ok(&run(&["--config", c, "--data-root", "data", "synth"], tmp.path()), "synth");
    assert_ok(
        &run(&["--config", c, "--data-root", "data", "--out", "run", "train"], tmp.path()),
        "train",
    );
    let ckpt = tmp.path().join("run/checkpoint_seed0.ckpt");
    assert!(ckpt.exists());
    assert!(tmp.path().join("run/metrics.csv").exists());
    assert!(tmp.path().join("run/manifest.json").exists());

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("run/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "train");
    assert!(manifest["artifacts"].as_array().unwrap().len() >= 3);

    assert_ok(
        &run(
            &[
                "--config",
                c,
                "--data-root",
                "data",
                "--out",
                "run-eval",
                "evaluate",
                "--checkpoint",
                ckpt.to_str().unwrap(),
            ],
            tmp.path(),
        ),
        "evaluate",
    );
    assert!(tmp.path().join("run-eval/report.txt").exists());
    assert!(tmp.path().join("run-eval/confusion.csv").exists());

    assert_ok(
        &run(
            &[
                "--config",
                c,
                "--data-root",
                "data",
                "--out",
                "run-lat",
                "latents",
                "--checkpoint",
                ckpt.to_str().unwrap(),
            ],
            tmp.path(),
        ),
        "latents",
    );
    let latents = std::fs::read_to_string(tmp.path().join("run-lat/latents.csv")).unwrap();
    let mut lines = latents.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("trial_id,fabric_id,stretchiness,roughness,thickness,z0"));
    // One row per trial: 2 classes x 3 trials.
    assert_eq!(lines.count(), 6);
}

#[test]
fn extract_features_skips_warm_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let c = cfg.to_str().unwrap();
    assert_ok(&run(&["--config", c, "--data-root", "data", "synth"], tmp.path()), "synth");
    let first = run(
        &["--config", c, "--data-root", "data", "--out", "feat", "extract-features"],
        tmp.path(),
    );
    assert_ok(&first, "extract-features");
    assert!(String::from_utf8_lossy(&first.stdout).contains("6 extracted, 0 reused"));
    let second = run(
        &["--config", c, "--data-root", "data", "--out", "feat", "extract-features"],
        tmp.path(),
    );
    assert_ok(&second, "extract-features rerun");
    assert!(String::from_utf8_lossy(&second.stdout).contains("0 extracted, 6 reused"));

    // Sidecar shape matches the binary payload.
    let feat_dir = std::fs::read_dir(tmp.path().join("feat/features"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let sidecar: serde_json::Value =
        serde_json::from_slice(&std::fs::read(feat_dir.join("psd_internal.json")).unwrap())
            .unwrap();
    assert_eq!(sidecar["shape"], serde_json::json!([40, 512]));
    assert_eq!(sidecar["bin_width_hz"], serde_json::json!(46.875));
    let bin = std::fs::read(feat_dir.join("psd_internal.f32")).unwrap();
    assert_eq!(bin.len(), 40 * 512 * 4);
}

#[test]
fn ablate_bandwidth_emits_four_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let c = cfg.to_str().unwrap();
    assert_ok(&run(&["--config", c, "--data-root", "data", "synth"], tmp.path()), "synth");
    let out = run(
        &[
            "--config", c, "--data-root", "data", "--out", "ab",
            "--seeds", "1", "--epochs", "1", "ablate", "--grid", "bandwidth",
        ],
        tmp.path(),
    );
    assert_ok(&out, "ablate bandwidth");
    let csv = std::fs::read_to_string(tmp.path().join("ab/table.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4, "expected 4 bandwidth rows:\n{csv}");
    for label in ["2.5kHz", "10.0kHz", "15.0kHz", "24.0kHz"] {
        assert!(csv.contains(label), "missing {label} row:\n{csv}");
    }
}
