//! Subcommand behavior: exit codes, output artifacts, cache idempotence and
//! byte determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scanreg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scanreg"))
}

fn tiny_config(dir: &Path, name: &str) -> PathBuf {
    let path = dir.join("config.toml");
    let text = format!(
        r#"
[run]
name = "{name}"
out_dir = "{out}"
seed = 5
deterministic = true

[dataset]
kind = "synthetic"
synth_pairs = 2
synth_points = 700

[dataset.synth]
jitter = 0.005
overlap = 0.9

[preprocess]
voxel_size = 0.05
sample_points = 600

[network]
feature_width = 16
global_width = 16
descriptor_dim = 16
detector_hidden = [16]
saliency_hidden = [8]
descriptor_point_hidden = [16]
descriptor_fuse_hidden = [16]

[detector]
candidates = 24
neighbors = 8
dilation_ratio = 2

[training]
stage1_epochs = 1
stage2_epochs = 1
checkpoint_every = 0

[eval]
keypoint_counts = [8, 16]

[bench]
input_sizes = [600]
keypoint_counts = [8]
repeats = 1
"#,
        out = dir.join("runs").display(),
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn run_ok(output: &Output) {
    assert!(
        output.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn bad_config_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[loss]\ntemperature = -2.0\n").unwrap();
    let out = scanreg().args(["eval", "-c"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_file_exits_3() {
    let out = scanreg()
        .args(["eval", "-c", "/nonexistent/cfg.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn missing_checkpoint_names_expected_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "nockpt");
    let out = scanreg().args(["eval", "-c"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("checkpoints/full.bin"),
        "error must name the expected checkpoint path, got: {stderr}"
    );
}

#[test]
fn preprocess_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "pre");
    let first = scanreg().args(["preprocess", "-c"]).arg(&cfg).output().unwrap();
    run_ok(&first);
    let stdout = String::from_utf8_lossy(&first.stdout);
    assert!(stdout.contains("4 written"), "got: {stdout}");

    let second = scanreg().args(["preprocess", "-c"]).arg(&cfg).output().unwrap();
    run_ok(&second);
    let stdout = String::from_utf8_lossy(&second.stdout);
    assert!(stdout.contains("0 written"), "rerun must hit the cache: {stdout}");
    assert!(stdout.contains("4 cache hits"), "got: {stdout}");

    let cache = dir.path().join("runs/pre/cache");
    assert!(cache.join("pair0000_source.srp").exists());
    assert!(cache.join("cache_meta.json").exists());
}

#[test]
fn full_cli_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "full");
    let run_dir = dir.path().join("runs/full");

    run_ok(&scanreg().args(["train", "-c"]).arg(&cfg).output().unwrap());
    assert!(run_dir.join("checkpoints/stage1.bin").exists());
    assert!(run_dir.join("checkpoints/full.bin").exists());
    assert!(run_dir.join("logs/loss_curve.csv").exists());
    assert!(run_dir.join("config.resolved").exists());

    run_ok(
        &scanreg()
            .args(["detect", "-c"])
            .arg(&cfg)
            .args(["--pair-index", "0"])
            .output()
            .unwrap(),
    );
    assert!(run_dir.join("reports/pair0000_source_keypoints.csv").exists());
    assert!(run_dir.join("reports/pair0000_source_keypoints.bin").exists());

    run_ok(
        &scanreg()
            .args(["describe", "-c"])
            .arg(&cfg)
            .args(["--pair-index", "0", "--side", "target"])
            .output()
            .unwrap(),
    );
    assert!(run_dir
        .join("reports/pair0000_target_descriptors.bin")
        .exists());

    run_ok(
        &scanreg()
            .args(["register", "-c"])
            .arg(&cfg)
            .args(["--pair-index", "0"])
            .output()
            .unwrap(),
    );
    let result: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(run_dir.join("reports/pair0000_result.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(result["rotation"].as_array().unwrap().len(), 9);
    assert!(result["success"].is_boolean());
    assert!(result["rte"].is_number(), "dataset pairs report RTE");

    run_ok(&scanreg().args(["eval", "-c"]).arg(&cfg).output().unwrap());
    assert!(run_dir.join("reports/report.json").exists());
    assert!(run_dir.join("reports/pairs.csv").exists());

    run_ok(&scanreg().args(["bench", "-c"]).arg(&cfg).output().unwrap());
    assert!(run_dir.join("reports/bench.csv").exists());
}

#[test]
fn explicit_cloud_registration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "explicit");
    run_ok(&scanreg().args(["train", "-c"]).arg(&cfg).output().unwrap());
    run_ok(&scanreg().args(["preprocess", "-c"]).arg(&cfg).output().unwrap());
    let cache = dir.path().join("runs/explicit/cache");
    let out = scanreg()
        .args(["register", "-c"])
        .arg(&cfg)
        .arg("--source")
        .arg(cache.join("pair0000_source.srp"))
        .arg("--target")
        .arg(cache.join("pair0000_target.srp"))
        .output()
        .unwrap();
    run_ok(&out);
    let result = dir.path().join("runs/explicit/reports/explicit_result.json");
    assert!(result.exists());
}

#[test]
fn detect_outputs_are_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "det");
    run_ok(&scanreg().args(["train", "-c"]).arg(&cfg).output().unwrap());
    let reports = dir.path().join("runs/det/reports");
    let read = |name: &str| std::fs::read(reports.join(name)).unwrap();

    run_ok(
        &scanreg()
            .args(["detect", "-c"])
            .arg(&cfg)
            .args(["--pair-index", "1"])
            .output()
            .unwrap(),
    );
    let first_csv = read("pair0001_source_keypoints.csv");
    let first_bin = read("pair0001_source_keypoints.bin");
    run_ok(
        &scanreg()
            .args(["detect", "-c"])
            .arg(&cfg)
            .args(["--pair-index", "1"])
            .output()
            .unwrap(),
    );
    assert_eq!(first_csv, read("pair0001_source_keypoints.csv"));
    assert_eq!(first_bin, read("pair0001_source_keypoints.bin"));
}
