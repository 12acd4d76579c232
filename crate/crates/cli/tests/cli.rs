use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn tenet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tenet"))
        .current_dir(dir)
        .env_remove("TENET_ENDPOINT")
        .env_remove("TENET_TIMEOUT")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = tenet(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stage report on stdout")
}

fn error_record(out: &Output) -> Value {
    let line = String::from_utf8_lossy(&out.stderr);
    let last = line.lines().last().expect("error record");
    serde_json::from_str(last).expect("error record is json")
}

const TINY_SPEC: &str = r#"
prefix = "t"

[suite]
videos = 6
min_frames = 8
max_frames = 12
"#;

const TINY_CONFIG: &str = r#"
seed = 3

[model]
d_model = 8
heads = 2
frames = 4

[training]
epochs = 3
"#;

fn setup(dir: &Path) {
    fs::write(dir.join("spec.toml"), TINY_SPEC).unwrap();
    fs::write(dir.join("tenet.toml"), TINY_CONFIG).unwrap();
}

fn bundled(name: &str) -> String {
    format!("{}/../../configs/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn full_chain(dir: &Path) {
    let config = bundled("tiny.toml");
    let c = ["--config", config.as_str()];
    ok(dir, &[&c[..], &["synth"]].concat());
    ok(dir, &[&c[..], &["track"]].concat());
    ok(dir, &[&c[..], &["prompts"]].concat());
    ok(dir, &[&c[..], &["train"]].concat());
    ok(dir, &[&c[..], &["select", "--checkpoint", "out/model.jsonl"]].concat());
    ok(dir, &[&c[..], &["segment"]].concat());
    ok(dir, &[&c[..], &["eval"]].concat());
}

#[test]
fn full_chain_on_the_bundled_tiny_dataset() {
    let dir = tempfile::tempdir().unwrap();
    full_chain(dir.path());
    let eval: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/eval.json")).unwrap()).unwrap();
    let jf = eval["report"]["JF"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&jf));
    let names: Vec<&str> = eval["rows"].as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap()).collect();
    for n in ["reference", "highest_confidence", "oracle_best", "selected", "merged_oracle"] {
        assert!(names.contains(&n), "missing row {n}");
    }
    for stage in ["track", "prompts", "train", "select", "segment", "eval"] {
        assert!(dir.path().join(format!("out/{stage}.config.json")).is_file());
    }
    assert!(dir.path().join("data/synth.config.json").is_file());
}

#[test]
fn oracle_selection_never_loses_to_reference() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let c = ["--config", "tenet.toml"];
    ok(dir.path(), &[&c[..], &["synth", "--spec", "spec.toml"]].concat());
    ok(dir.path(), &[&c[..], &["prompts"]].concat());
    ok(dir.path(), &[&c[..], &["select", "--oracle"]].concat());
    ok(dir.path(), &[&c[..], &["segment"]].concat());
    ok(dir.path(), &[&c[..], &["eval"]].concat());
    let eval: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/eval.json")).unwrap()).unwrap();
    let row = |n: &str| {
        eval["rows"]
            .as_array()
            .unwrap()
            .iter()
            .find(|r| r["name"] == n && r["subset"] == "all")
            .unwrap()["box_miou"]
            .as_f64()
            .unwrap()
    };
    assert!(row("selected") >= row("reference"));
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    ok(dir.path(), &["--config", "tenet.toml", "synth", "--spec", "spec.toml"]);
    ok(dir.path(), &["--config", "tenet.toml", "prompts"]);
    let first = fs::read(dir.path().join("out/prompts.jsonl")).unwrap();
    let features = fs::read(dir.path().join("out/features.jsonl")).unwrap();
    ok(dir.path(), &["--config", "tenet.toml", "--jobs", "1", "prompts"]);
    assert_eq!(fs::read(dir.path().join("out/prompts.jsonl")).unwrap(), first);
    assert_eq!(fs::read(dir.path().join("out/features.jsonl")).unwrap(), features);
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tenet(dir.path(), &["track"]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!(rec["stage"], "track");
    assert_eq!(rec["kind"], "missing_input");
    assert!(rec["message"].as_str().unwrap().contains("videos.jsonl"));
}

#[test]
fn bad_flags_give_a_json_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = tenet(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["kind"], "usage");

    let out = tenet(dir.path(), &["prompts", "--top-k", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["kind"], "config");
}

#[test]
fn environment_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    ok(dir.path(), &["--config", "tenet.toml", "synth", "--spec", "spec.toml"]);
    ok(dir.path(), &["--config", "tenet.toml", "prompts"]);
    ok(dir.path(), &["--config", "tenet.toml", "select"]);
    let out = Command::new(env!("CARGO_BIN_EXE_tenet"))
        .current_dir(dir.path())
        .env("TENET_TIMEOUT", "7.5")
        .env("TENET_ENDPOINT", "http://127.0.0.1:9")
        .env("RUST_LOG", "warn")
        .args(["--config", "tenet.toml", "segment", "--timeout", "2", "--retries", "0"])
        .output()
        .unwrap();
    // nothing listens on the discard port, so the remote client must fail
    assert!(!out.status.success());
    let effective: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/select.config.json")).unwrap()).unwrap();
    assert_eq!(effective["seed"], 3);

    let out = Command::new(env!("CARGO_BIN_EXE_tenet"))
        .current_dir(dir.path())
        .env_remove("TENET_ENDPOINT")
        .env("TENET_TIMEOUT", "7.5")
        .env("RUST_LOG", "warn")
        .args(["--config", "tenet.toml", "segment", "--timeout", "2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let effective: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/segment.config.json")).unwrap()).unwrap();
    assert_eq!(effective["segment"]["timeout_secs"], 7.5);
}

#[test]
fn ground_truth_prompts_reach_perfect_jf() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    ok(dir.path(), &["--config", "tenet.toml", "synth", "--spec", "spec.toml"]);
    ok(dir.path(), &["--config", "tenet.toml", "segment", "--prompt", "ground_truth"]);
    let report = ok(dir.path(), &["--config", "tenet.toml", "eval"]);
    assert_eq!(report["metrics"]["JF"], 1.0);
}
