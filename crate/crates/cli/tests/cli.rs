use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn partseg(workspace: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partseg"))
        .args(args)
        .env("PARTSEG_WORKSPACE", workspace)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stdout: {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

#[test]
fn benchmark_manifests_repeat_exactly() {
    let ws = tempfile::tempdir().unwrap();
    for dir in ["a", "b"] {
        ok(&partseg(ws.path(), &["make-benchmark", "--out", dir, "--seed", "7", "--n", "12", "--resolution", "32"]));
    }
    let a = fs::read(ws.path().join("a/manifest.json")).unwrap();
    let b = fs::read(ws.path().join("b/manifest.json")).unwrap();
    assert_eq!(a, b);
    assert_eq!(fs::read(ws.path().join("a/labels/00003.png")).unwrap(), fs::read(ws.path().join("b/labels/00003.png")).unwrap());
}

#[test]
fn bad_configuration_exits_with_two_and_names_the_key() {
    let ws = tempfile::tempdir().unwrap();
    let out = partseg(ws.path(), &["make-benchmark", "--out", "x", "--colour_jitter", "0.1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour_jitter"));

    fs::write(ws.path().join("bad.toml"), "lr_g = 0.001\nlearning_rate = 3\n").unwrap();
    let out = partseg(ws.path(), &["train-gan", "--data", "missing", "--out", "g", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = partseg(ws.path(), &["train-gan", "--data", "missing", "--out", "g", "--preset", "tiny", "--beta1", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("beta1"));
}

#[test]
fn runtime_failures_exit_with_one() {
    let ws = tempfile::tempdir().unwrap();
    let out = partseg(ws.path(), &["sample", "--checkpoint", "nope.pt", "--out", "s.png"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn perfect_predictions_score_perfectly() {
    let ws = tempfile::tempdir().unwrap();
    ok(&partseg(ws.path(), &["make-benchmark", "--out", "gt", "--n", "30", "--resolution", "32", "--parts", "3"]));
    ok(&partseg(ws.path(), &["eval", "--data", "gt", "--predictions", "gt", "--out", "report.json"]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path().join("report.json")).unwrap()).unwrap();
    let value = |name: &str| {
        report.as_array().unwrap().iter().find(|r| r["metric"] == name).unwrap()["value"].as_f64().unwrap()
    };
    assert_eq!(value("foreground_iou"), 1.0);
    assert!(value("landmark_error_percent") < 1e-9);
    assert!(value("keypoint_mae_px") < 1e-9);
}

#[test]
fn pipeline_runs_end_to_end_and_resumes() {
    let ws = tempfile::tempdir().unwrap();
    let w = ws.path();
    ok(&partseg(w, &["make-benchmark", "--out", "data", "--n", "16", "--resolution", "32"]));
    let train = ["train-gan", "--data", "data", "--out", "gan", "--preset", "tiny"];
    let cadence = ["--sample_every", "2", "--log_every", "1"];
    ok(&partseg(w, &[&train[..], &cadence, &["--total_updates", "2"]].concat()));
    assert!(w.join("gan/checkpoint.pt").exists());
    assert!(w.join("gan/samples_000002.png").exists());
    assert!(fs::read_to_string(w.join("gan/config.toml")).unwrap().contains("total_updates = 2"));

    ok(&partseg(w, &[&train[..], &["--resume"], &cadence, &["--total_updates", "3"]].concat()));
    assert_eq!(fs::read_to_string(w.join("gan/losses.jsonl")).unwrap().lines().count(), 3);
    ok(&partseg(w, &[&train[..], &["--resume"], &cadence, &["--total_updates", "3"]].concat()));
    assert_eq!(fs::read_to_string(w.join("gan/losses.jsonl")).unwrap().lines().count(), 3, "finished run is not extended");
    let out = partseg(w, &[&train[..], &["--resume", "--total_updates", "4", "--lr_g", "0.01"]].concat());
    assert_eq!(out.status.code(), Some(1), "changed hyperparameters refuse to resume");

    ok(&partseg(w, &["sample", "--checkpoint", "gan/checkpoint.pt", "--out", "grid.png", "--n", "4"]));
    assert!(w.join("grid.png").exists());
    ok(&partseg(w, &["synth-pairs", "--checkpoint", "gan/checkpoint.pt", "--out", "pairs", "--n", "8", "--seed", "3"]));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(w.join("pairs/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 8);
    assert_eq!(manifest["num_parts"], 3);
    assert!(manifest["checkpoint_hash"].is_string());

    ok(&partseg(w, &["train-seg", "--pairs", "pairs", "--out", "seg.pt", "--iterations", "2", "--batch_size", "4", "--width", "8"]));
    ok(&partseg(w, &["train-seg", "--checkpoint", "gan/checkpoint.pt", "--out", "seg_stream.pt", "--iterations", "1", "--batch_size", "2", "--width", "8"]));
    let out = partseg(w, &["eval", "--data", "data", "--segmenter", "seg.pt", "--out", "report.json"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("foreground_iou"));
}

#[test]
fn verify_prints_a_table_of_checks() {
    let ws = tempfile::tempdir().unwrap();
    let out = partseg(ws.path(), &["verify"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("9 of 9 checks passed"), "{text}");
    assert_eq!(text.lines().filter(|l| l.contains(" PASS ")).count(), 9, "{text}");
}
