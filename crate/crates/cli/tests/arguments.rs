//! Argument handling of the `nucleosynth` binary.

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nucleosynth"))
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn missing_required_flag_exits_2() {
    let out = bin().args(["sample-labels", "--out", "x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_fails_before_touching_the_output() {
    let tmp = tempfile::tempdir().unwrap();
    let target = tmp.path().join("run");
    let out = bin()
        .args(["gen-data", "--set", "data.h=30", "--out"])
        .arg(&target)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"], "config");
    assert!(!target.exists());
}

#[test]
fn thread_variable_is_validated_and_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = bin()
        .env("NUCLEOSYNTH_THREADS", "0")
        .args(["gen-data", "--n", "1", "--out"])
        .arg(tmp.path().join("a"))
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let ok = bin()
        .env("NUCLEOSYNTH_THREADS", "3")
        .args(["gen-data", "--n", "2", "--set", "data.h=16", "--set", "data.w=16", "--out"])
        .arg(tmp.path().join("b"))
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let m = nucleosynth_cli::run_dir::read_manifest(&tmp.path().join("b")).unwrap();
    assert_eq!(m.threads, 3);
    assert_eq!(m.outputs.iter().filter(|f| f.starts_with("img_")).count(), 2);
    let echo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("b/config.json")).unwrap()).unwrap();
    assert_eq!(echo["data.h"], 16);
}
