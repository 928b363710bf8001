//! End-to-end checks of the `scarcegrad` binary.

use std::process::{Command, Output};

fn scarcegrad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scarcegrad")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn unknown_preset_is_a_config_error() {
    let out = scarcegrad(&["run", "no-such-preset"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown preset"));
}

#[test]
fn unknown_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = scarcegrad(&["gen-dataset", "citeseer", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grad_check_passes() {
    let out = scarcegrad(&["grad-check", "--instances", "5"]);
    assert!(out.status.success(), "{}", stdout(&out));
    let text = stdout(&out);
    assert!(!text.contains("FAIL"));
    for name in ["matmul", "gcn/cce", "laplacian"] {
        assert!(text.contains(name), "{name} missing from\n{text}");
    }
}

#[test]
fn presets_are_listed_and_printable() {
    let list = stdout(&scarcegrad(&["presets"]));
    assert!(list.lines().any(|l| l == "cheaters-baseline"));
    let toml = scarcegrad(&["presets", "cheaters-g2g"]);
    assert!(toml.status.success());
    assert!(stdout(&toml).contains("kind = \"g2g\""));
}

#[test]
fn generate_run_profile_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cheaters");
    let out = scarcegrad(&["gen-dataset", "cheaters", "--seed", "2", "--out", data.to_str().unwrap()]);
    assert!(out.status.success());
    for file in ["X.csv", "edges.txt", "labels.csv", "splits.json", "dataset.json", "a_star.txt"] {
        assert!(data.join(file).is_file(), "{file}");
    }

    let run_dir = dir.path().join("run");
    let out = scarcegrad(&[
        "run",
        "cheaters-baseline",
        "--tau-out",
        "9",
        "--tau-in",
        "10",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).starts_with("best iteration"));
    assert!(run_dir.join("metrics.svg").is_file());
    assert!(run_dir.join("profile_iter9.svg").is_file());

    let profile = scarcegrad(&["profile", run_dir.to_str().unwrap(), "--iteration", "9"]);
    assert!(profile.status.success());
    assert!(stdout(&profile).contains("distance"));
    let missing = scarcegrad(&["profile", run_dir.to_str().unwrap(), "--iteration", "150"]);
    assert_eq!(missing.status.code(), Some(1));

    let report = scarcegrad(&["report", run_dir.to_str().unwrap()]);
    assert!(report.status.success());
    assert!(stdout(&report).contains("objective.svg"));
}
