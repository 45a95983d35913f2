//! End-to-end smoke tests driving the compiled binary.

use std::path::Path;
use std::process::{Command, Output};

fn rfseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfseg"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed (status {:?})\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

fn synth_blobs(dir: &Path, n: usize, extra: &[&str]) {
    let dir = dir.to_str().unwrap();
    let n = n.to_string();
    let mut args = vec![
        "synth", "--kind", "blobs", "--n", &n, "--width", "32", "--height", "32", "--out", dir,
    ];
    args.extend_from_slice(extra);
    assert_ok(&rfseg(&args), "synth");
}

#[test]
fn synth_train_predict_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_blobs(&data, 6, &["--seed", "1"]);
    assert!(data.join("images").join("blob_000.png").is_file());
    assert!(data.join("masks").join("blob_005.png").is_file());

    let model = tmp.path().join("blob.model");
    let out = rfseg(&[
        "train",
        "--data", data.to_str().unwrap(),
        "--arch", "fe",
        "--model-out", model.to_str().unwrap(),
        "--trees", "5",
        "--sampling", "per-image:200",
        "--target", "32",
        "--ratio", "0.7",
        "--augment-factor", "1",
        "--seed", "1",
    ]);
    assert_ok(&out, "train");
    assert!(model.is_file());
    let manifest = tmp.path().join("blob.model.split.tsv");
    assert!(manifest.is_file(), "default manifest path not written");
    assert!(tmp.path().join("blob.model.resources.csv").is_file());
    let manifest_text = std::fs::read_to_string(&manifest).unwrap();
    assert_eq!(manifest_text.lines().filter(|l| l.ends_with("\ttrain")).count(), 4);
    assert_eq!(manifest_text.lines().filter(|l| l.ends_with("\ttest")).count(), 2);

    let preds = tmp.path().join("preds");
    let out = rfseg(&[
        "predict",
        "--model", model.to_str().unwrap(),
        "--input", data.join("images").to_str().unwrap(),
        "--out", preds.to_str().unwrap(),
        "--overlay",
    ]);
    assert_ok(&out, "predict");
    for i in 0..6 {
        assert!(preds.join(format!("blob_{i:03}.png")).is_file());
        assert!(preds.join(format!("blob_{i:03}_overlay.png")).is_file());
    }

    let report = tmp.path().join("report.csv");
    let out = rfseg(&[
        "eval",
        "--data", data.to_str().unwrap(),
        "--manifest", manifest.to_str().unwrap(),
        "--model", model.to_str().unwrap(),
        "--report", report.to_str().unwrap(),
        "--pooled",
    ]);
    assert_ok(&out, "eval");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("model=rf_fe images=2"), "headline missing: {stdout}");
    assert!(stdout.contains("pooled macro_accuracy="), "pooled line missing: {stdout}");
    let report_text = std::fs::read_to_string(&report).unwrap();
    assert!(report_text.starts_with("image_id,class,accuracy,dice,iou,sensitivity"));
    assert!(report_text.lines().any(|l| l.starts_with("aggregate_")));
}

#[test]
fn eval_accepts_external_masks_and_scores_ground_truth_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_blobs(&data, 5, &[]);
    let model = tmp.path().join("m.model");
    let out = rfseg(&[
        "train",
        "--data", data.to_str().unwrap(),
        "--arch", "fe",
        "--model-out", model.to_str().unwrap(),
        "--trees", "3",
        "--sampling", "per-image:100",
        "--target", "32",
        "--augment-factor", "1",
    ]);
    assert_ok(&out, "train");

    // the ground-truth masks themselves, presented as external predictions
    let report = tmp.path().join("gt.csv");
    let out = rfseg(&[
        "eval",
        "--data", data.to_str().unwrap(),
        "--manifest", tmp.path().join("m.model.split.tsv").to_str().unwrap(),
        "--pred-dir", data.join("masks").to_str().unwrap(),
        "--report", report.to_str().unwrap(),
    ]);
    assert_ok(&out, "eval --pred-dir");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("macro_accuracy=1.000000 dice=1.000000 iou=1.000000"),
        "ground truth should score perfectly: {stdout}"
    );
}

#[test]
fn eval_requires_exactly_one_prediction_source() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_blobs(&data, 3, &[]);
    let manifest = tmp.path().join("split.tsv");
    std::fs::write(&manifest, "blob_000\ttrain\nblob_001\ttrain\nblob_002\ttest\n").unwrap();
    let report = tmp.path().join("r.csv");
    let args_base = [
        "eval",
        "--data", data.to_str().unwrap(),
        "--manifest", manifest.to_str().unwrap(),
        "--report", report.to_str().unwrap(),
    ];
    let neither = rfseg(&args_base);
    assert_eq!(neither.status.code(), Some(2), "neither source should be a usage error");
    let both = Command::new(env!("CARGO_BIN_EXE_rfseg"))
        .args(args_base)
        .args(["--model", "m", "--pred-dir", data.join("masks").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(both.status.code(), Some(2), "both sources should be a usage error");
}

#[test]
fn missing_dataset_directory_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = rfseg(&[
        "train",
        "--data", tmp.path().join("nope").to_str().unwrap(),
        "--arch", "fe",
        "--model-out", tmp.path().join("m").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("error"),
        "diagnostic should go to stderr"
    );
    assert!(out.stdout.is_empty(), "diagnostics must not pollute stdout");
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg");
    std::fs::write(&cfg, "trees = 5\nbogus-knob = 1\n").unwrap();
    let out = rfseg(&[
        "--config", cfg.to_str().unwrap(),
        "synth", "--kind", "blobs", "--n", "1",
        "--out", tmp.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus-knob"));
}

#[test]
fn flag_beats_config_beats_default() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg");
    std::fs::write(&cfg, "# comment line\nseed = 5\n").unwrap();
    let probe = data_bytes_after(&tmp, "flagged5", &["--seed", "5"]);
    let from_config = data_bytes_after(&tmp, "config5", &["--config", cfg.to_str().unwrap()]);
    let default0 = data_bytes_after(&tmp, "default", &[]);
    let flag_wins =
        data_bytes_after(&tmp, "flag0", &["--seed", "0", "--config", cfg.to_str().unwrap()]);
    assert_eq!(from_config, probe, "config seed should act like the equivalent flag");
    assert_ne!(default0, probe, "different seeds should change the data");
    assert_eq!(flag_wins, default0, "an explicit flag should override the config file");
}

fn data_bytes_after(tmp: &tempfile::TempDir, label: &str, global: &[&str]) -> Vec<u8> {
    let dir = tmp.path().join(label);
    let mut args: Vec<&str> = global.to_vec();
    let dir_s = dir.to_str().unwrap().to_string();
    args.extend_from_slice(&["synth", "--kind", "blobs", "--n", "2", "--width", "32",
        "--height", "32", "--out"]);
    args.push(&dir_s);
    assert_ok(&rfseg(&args), "synth for precedence probe");
    std::fs::read(dir.join("images").join("blob_000.png")).unwrap()
}

#[test]
fn bench_writes_resource_and_report_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_blobs(&data, 5, &[]);
    let out_dir = tmp.path().join("bench");
    let out = rfseg(&[
        "bench",
        "--data", data.to_str().unwrap(),
        "--archs", "fe,wi",
        "--out-dir", out_dir.to_str().unwrap(),
        "--trees", "3",
        "--sampling", "per-image:100",
        "--target", "32",
        "--wi-size", "8",
        "--augment-factor", "1",
    ]);
    assert_ok(&out, "bench");
    assert!(out_dir.join("report_rf_fe.csv").is_file());
    assert!(out_dir.join("report_rf_wi.csv").is_file());
    let resources = std::fs::read_to_string(out_dir.join("resources.csv")).unwrap();
    assert!(resources.starts_with("model,phase,wall_seconds,peak_resident_bytes"));
    for needle in ["rf_fe,train", "rf_wi,train", "rf_fe,predict", "rf_wi,predict"] {
        assert!(resources.contains(needle), "resources.csv missing {needle}: {resources}");
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("model=rf_fe"));
    assert!(stdout.contains("model=rf_wi"));
}

#[test]
fn predict_accepts_a_single_image_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_blobs(&data, 3, &[]);
    let model = tmp.path().join("m.model");
    let out = rfseg(&[
        "train",
        "--data", data.to_str().unwrap(),
        "--arch", "wi",
        "--model-out", model.to_str().unwrap(),
        "--trees", "3",
        "--target", "32",
        "--wi-size", "8",
        "--augment-factor", "1",
    ]);
    assert_ok(&out, "train wi");
    let preds = tmp.path().join("preds");
    let out = rfseg(&[
        "predict",
        "--model", model.to_str().unwrap(),
        "--input", data.join("images").join("blob_001.png").to_str().unwrap(),
        "--out", preds.to_str().unwrap(),
    ]);
    assert_ok(&out, "predict single file");
    assert!(preds.join("blob_001.png").is_file());
    assert!(!preds.join("blob_000.png").exists());
}
