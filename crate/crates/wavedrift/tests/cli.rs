//! End-to-end checks of the binary: exit codes, stdout JSON, config echo.

use std::process::Command;
use wavedrift::config::RunConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wavedrift"))
}

fn stdout_json(out: &std::process::Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}):\n{}",
            String::from_utf8_lossy(&out.stdout)
        )
    })
}

#[test]
fn nagumo_solve_reports_the_known_speed() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["wave", "solve", "--model", "nagumo", "--a", "0.1", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    let speed = v["speed"].as_f64().unwrap();
    assert!((speed - 0.5657).abs() < 1e-3, "speed = {speed}");
    let fp = v["config_fingerprint"].as_str().unwrap();
    assert_eq!(fp.len(), 64);

    // The echo next to the outputs reparses to the same fingerprint.
    let echo = std::fs::read_to_string(dir.path().join("config.echo.json")).unwrap();
    let cfg = RunConfig::parse(&echo).unwrap();
    assert_eq!(cfg.fingerprint(), fp);
    assert_eq!(cfg.canonical_json(), echo);

    // Artifacts carry the fingerprint.
    let csv = std::fs::read_to_string(dir.path().join("wave.csv")).unwrap();
    assert!(csv.starts_with(&format!("# config {fp}")));
    let json = std::fs::read_to_string(dir.path().join("wave.json")).unwrap();
    assert!(json.contains(fp));
}

#[test]
fn missing_config_exits_one_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("results");
    let out = bin()
        .args(["wave", "solve", "--config", "/no/such/config.json", "--out"])
        .arg(&target)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "validation");
    assert!(!target.exists(), "partial outputs were written");
}

#[test]
fn numerical_breakdown_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    // A 12-unit window cannot hold the a = 0.1 front: Newton stalls.
    let out = bin()
        .args([
            "wave",
            "solve",
            "--model",
            "nagumo",
            "--a",
            "0.1",
            "--half-length",
            "6",
            "--points",
            "64",
            "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "numerical");
}

#[test]
fn unknown_flags_exit_one() {
    let out = bin().args(["wave", "solve", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "validation");
}

#[test]
fn stability_rate_above_twice_the_gap_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "sim",
            "run",
            "--model",
            "nagumo",
            "--a",
            "0.3",
            "--half-length",
            "40",
            "--points",
            "512",
            "--eps",
            "0.4",
            "--t-end",
            "0.1",
            "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "validation");
    assert!(err["message"].as_str().unwrap().contains("stochastic.eps"));
}

#[test]
fn config_file_drives_a_run_and_overrides_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.json");
    std::fs::write(
        &cfg_path,
        r#"{"model": {"name": "nagumo", "a": 0.25}, "grid": {"half_length": 40.0, "points": 1024}}"#,
    )
    .unwrap();
    let out = bin()
        .args(["wave", "solve", "--config"])
        .arg(&cfg_path)
        .args(["--a", "0.3", "--out"])
        .arg(dir.path().join("res"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    // 2^(1/2) * (1/2 - a) at a = 0.3.
    let expect = std::f64::consts::SQRT_2 * 0.2;
    assert!((v["speed"].as_f64().unwrap() - expect).abs() < 1e-3);
    assert_eq!(v["a"].as_f64().unwrap(), 0.3);
}
