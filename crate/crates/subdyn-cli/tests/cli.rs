//! Black-box checks of the scenario runner: exit codes, manifest artifacts,
//! and deterministic reruns.

use std::fs;
use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_subdyn"))
}

fn tempdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("subdyn-cli-{tag}-{}", std::process::id()));
    fs::remove_dir_all(&dir).ok();
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn bundled_scenario_runs_clean_and_is_deterministic() {
    let out = tempdir("run");
    let status = bin()
        .args(["run", "--config", "free_particle"])
        .args(["--out-dir", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let manifest = out.join("manifest.json");
    let first = fs::read_to_string(&manifest).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert!(parsed["error"].is_null(), "unexpected error: {}", parsed["error"]);
    assert!(parsed["residuals"]["max_rel_deviation"].as_f64().unwrap() < 1e-8);

    // identical rerun: same scenario, same seed, same bytes
    let status = bin()
        .args(["run", "--config", "free_particle"])
        .args(["--out-dir", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert_eq!(first, fs::read_to_string(&manifest).unwrap());
    fs::remove_dir_all(&out).ok();
}

#[test]
fn malformed_config_exits_with_validation_code() {
    let dir = tempdir("bad");
    let cfg = dir.join("broken.json");
    fs::write(&cfg, "{ this is not json").unwrap();
    let output = bin()
        .args(["run", "--config", cfg.to_str().unwrap()])
        .args(["--out-dir", dir.join("out").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(!dir.join("out").join("manifest.json").exists(), "artifacts written for a bad config");
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn exceeded_assertion_exits_with_assertion_code() {
    let dir = tempdir("assert");
    let cfg = dir.join("tight.json");
    fs::write(
        &cfg,
        r#"{
            "name": "tight",
            "kind": "subdynamics",
            "seed": 11,
            "micro_energies": [1.0, 1.15],
            "bath_levels": 2,
            "coupling": 0.05,
            "beta": 1.0,
            "epsilon": 0.35,
            "tau0": 0.05,
            "tau1": 40.0,
            "t_points": 5,
            "assertions": { "max_rel_deviation": 1e-12 }
        }"#,
    )
    .unwrap();
    let output = bin()
        .args(["run", "--config", cfg.to_str().unwrap()])
        .args(["--out-dir", dir.join("out").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(4));
    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.join("out").join("manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["error"]["exit_code"], 4);
    assert_eq!(manifest["error"]["kind"], "assertion");
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn validate_accepts_bundled_scenarios() {
    for name in ["free_particle", "weak_coupling_subdyn"] {
        let status = bin().args(["validate", "--config", name]).status().unwrap();
        assert_eq!(status.code(), Some(0), "{name} failed validation");
    }
}
