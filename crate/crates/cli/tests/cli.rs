use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn zofed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zofed")).args(args).output().unwrap()
}

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn misspelled_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    let text = fs::read_to_string(configs().join("toy.json")).unwrap().replace("\"gamma\"", "\"gamam\"");
    fs::write(&cfg, text).unwrap();
    let out = zofed(&["run", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("did you mean \"gamma\""), "{err}");
    assert!(!dir.path().join("o").join("metrics.csv").exists());
}

#[test]
fn run_writes_metrics_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("toy");
    let out = zofed(&[
        "run",
        configs().join("toy.json").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("schema_version,"));
    assert_eq!(csv.lines().count(), 1 + 101);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert!(summary.is_object());
    let leftovers: Vec<_> = fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(leftovers.len(), 2, "{leftovers:?}");
}

#[test]
fn broken_step_size_fails_the_contraction_suite() {
    assert!(zofed(&["verify", "contraction"]).status.success());
    let out = zofed(&["verify", "contraction", "--break-alpha", "50"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stdout).contains("[FAIL]"));
}

#[test]
fn unknown_suite_is_a_config_error() {
    assert_eq!(zofed(&["verify", "nope"]).status.code(), Some(2));
}

#[test]
fn tune_prints_budget() {
    let out = zofed(&["tune", "two-stage", "--m", "4", "--k", "100", "--mu-f", "1", "--l-f", "2"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("gamma = 0.2"), "{text}");
    assert!(text.contains("H = 2"), "{text}");
    assert!(text.contains("alpha = 0.25"), "{text}");
}
