use std::fs;
use std::process::Command;

fn hycol() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hycol"))
}

#[test]
fn simulate_ideal_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("short.toml");
    fs::write(&scenario, "duration = 180.0\n\n[[disturbance]]\ntime = 60.0\nx_f = 0.34\n").unwrap();
    let out = dir.path().join("run");
    let status = hycol()
        .args(["simulate", "--approach", "iv", "--seed", "7", "--scenario"])
        .arg(&scenario)
        .arg("--out")
        .arg(&out)
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(status.success());
    for f in ["config.toml", "scenario.toml", "seed.txt", "metrics.csv", "steps_ideal.csv", "products_ideal.csv"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    assert_eq!(fs::read_to_string(out.join("seed.txt")).unwrap().trim(), "7");
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    let report = hycol().arg("report").arg("--run").arg(&out).output().unwrap();
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("ideal"));
}

#[test]
fn unknown_approach_fails() {
    let dir = tempfile::tempdir().unwrap();
    let status = hycol()
        .args(["simulate", "--approach", "v", "--out"])
        .arg(dir.path())
        .env("RUST_LOG", "off")
        .status()
        .unwrap();
    assert!(!status.success());
}

#[test]
fn unknown_config_key_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[column]\nstages = 40\n").unwrap();
    let status = hycol()
        .args(["steptests", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .env("RUST_LOG", "off")
        .status()
        .unwrap();
    assert!(!status.success());
}
