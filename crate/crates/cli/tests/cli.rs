use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bmn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bmn"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &str = r#"{
    "profile": "tiny",
    "paths": {
        "train": {"features": "data/train/features", "annotations": "data/train/annotations.json"},
        "val": {"features": "data/val/features", "annotations": "data/val/annotations.json"},
        "output": "runs"
    }
}"#;

#[test]
fn gen_synthetic_writes_the_requested_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = bmn(dir.path(), &["gen-synthetic", "--videos", "3", "--out", "ds"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_dir(dir.path().join("ds/train/features")).unwrap().count(), 3);
    assert!(dir.path().join("ds/val/annotations.json").exists());
}

#[test]
fn tiny_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let cfg = ["--config", "tiny.json"];
    for cmd in ["gen-synthetic", "train", "infer", "eval"] {
        let out = bmn(dir.path(), &[&[cmd][..], &cfg[..]].concat());
        assert_eq!(code(&out), 0, "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        if cmd == "train" {
            let text = stdout(&out);
            assert!(text.contains("epoch   1") && text.contains("epoch   2"), "{text}");
        }
        if cmd == "eval" {
            let text = stdout(&out);
            assert!(text.contains("AR@10") && text.contains("AUC"), "{text}");
        }
    }
    let csv = fs::read_to_string(dir.path().join("runs/proposals.csv")).unwrap();
    assert!(csv.starts_with("video,t_start,t_end,score"));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("runs/metrics.json")).unwrap()).unwrap();
    assert!(metrics["auc"].is_number());

    let resumed = bmn(dir.path(), &["train", "--config", "tiny.json", "--resume", "runs/model.bmnc", "--out", "runs2"]);
    assert_eq!(code(&resumed), 0);
    assert!(dir.path().join("runs2/model.bmnc").exists());
}

#[test]
fn usage_and_config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"model": {"max_duration": 500}}"#).unwrap();
    assert_eq!(code(&bmn(dir.path(), &["train", "--config", "bad.json"])), 2);
    assert_eq!(code(&bmn(dir.path(), &["train", "--config", "missing.json"])), 2);
    assert_eq!(code(&bmn(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&bmn(dir.path(), &["train", "--seed", "x"])), 2);
    fs::write(dir.path().join("file"), "").unwrap();
    assert_eq!(code(&bmn(dir.path(), &["gen-synthetic", "--videos", "1", "--out", "file/sub"])), 2);
}

#[test]
fn runtime_failures_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let out = bmn(dir.path(), &["train", "--config", "tiny.json"]);
    assert_eq!(code(&out), 1, "no dataset on disk yet");
    fs::write(dir.path().join("junk.bmnc"), b"nope").unwrap();
    assert_eq!(code(&bmn(dir.path(), &["gen-synthetic", "--config", "tiny.json"])), 0);
    let out = bmn(dir.path(), &["infer", "--config", "tiny.json", "--checkpoint", "junk.bmnc"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_backward() {
    let dir = tempfile::tempdir().unwrap();
    let ok = bmn(dir.path(), &["gradcheck", "--profile", "tiny", "--repeats", "2", "--out", "gc"]);
    let text = stdout(&ok);
    assert_eq!(code(&ok), 0, "{text}");
    assert!(text.contains("network.conv3d_1") && text.contains("max_rel_err"), "{text}");
    assert!(dir.path().join("gc/gradcheck.json").exists());

    let bad = bmn(dir.path(), &["gradcheck", "--profile", "tiny", "--repeats", "1", "--corrupt", "network.conv2d_2"]);
    assert_eq!(code(&bad), 1);
    assert!(stdout(&bad).contains("FAIL"));
}
