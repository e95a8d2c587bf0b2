//! End-to-end checks of the command-line surface: subcommands, file
//! outputs, and category-coded exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn homsync(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_homsync"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn write(path: &Path, body: &str) {
    std::fs::write(path, body).unwrap();
}

#[test]
fn dip_curve_writes_both_csv_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = homsync(
        &["dip-curve", "--v", "0.68", "--tc", "3000", "--range", "-12000:12000", "--step", "600",
          "--out", "curves"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["dip_curve_quadrature.csv", "dip_curve_envelope.csv"] {
        let body = std::fs::read_to_string(dir.path().join("curves").join(name)).unwrap();
        let mut lines = body.lines();
        assert_eq!(lines.next(), Some("delay_fs,relative_coincidence"));
        // Minimum at zero delay: 1 - V = 0.32.
        let at_zero = body
            .lines()
            .find(|l| l.starts_with("0,"))
            .and_then(|l| l.split(',').nth(1))
            .and_then(|v| v.parse::<f64>().ok())
            .unwrap();
        assert!((at_zero - 0.32).abs() < 1e-3, "{name}: dip floor {at_zero}");
    }
}

#[test]
fn dip_curve_rejects_bad_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let out = homsync(
        &["dip-curve", "--v", "1.4", "--tc", "3000", "--range", "0:100", "--step", "10"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let out = homsync(
        &["dip-curve", "--v", "0.5", "--tc", "3000", "--range", "100:0", "--step", "10"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn validate_accepts_good_and_rejects_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.toml");
    write(&good, "scenario = \"tcspc_selftest\"\nduration_s = 100.0\n");
    let out = homsync(&["validate", "--config", "good.toml"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    // Every resolved parameter is listed, defaults included.
    assert!(stdout.contains("scenario = \"tcspc_selftest\""));
    assert!(stdout.contains("pair_rate_hz = 3000.0"));
    assert!(stdout.contains("dither_depth_fs = 400.0"));

    let bad = dir.path().join("bad.toml");
    write(&bad, "scenario = \"locked_4km\"\n[plant.detectors.d3]\nefficiency = 1.5\n");
    let out = homsync(&["validate", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("efficiency"));

    let typo = dir.path().join("typo.toml");
    write(&typo, "scenario = \"locked_4km\"\nsped = 1\n");
    let out = homsync(&["validate", "--config", "typo.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = homsync(&["validate", "--config", "missing.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_executes_and_reports_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("selftest.toml");
    write(&cfg, "scenario = \"tcspc_selftest\"\nseed = 5\nduration_s = 200.0\n");
    let out = homsync(&["run", "--config", "selftest.toml", "--out", "result"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("scenario = tcspc_selftest"));
    assert!(stdout.contains("seed = 5"));
    for name in ["config_echo.toml", "selftest.csv", "selftest_tdev.csv", "summary.txt"] {
        assert!(dir.path().join("result").join(name).exists(), "missing {name}");
    }
}

#[test]
fn run_seed_override_changes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("st.toml");
    write(&cfg, "scenario = \"tcspc_selftest\"\nseed = 5\nduration_s = 100.0\n");
    let a = homsync(&["run", "--config", "st.toml", "--out", "a"], dir.path());
    let b = homsync(&["run", "--config", "st.toml", "--out", "b", "--seed", "6"], dir.path());
    assert!(a.status.success() && b.status.success());
    let fa = std::fs::read(dir.path().join("a/selftest.csv")).unwrap();
    let fb = std::fs::read(dir.path().join("b/selftest.csv")).unwrap();
    assert_ne!(fa, fb);
}

#[test]
fn batch_runs_every_config_in_parallel() {
    let dir = tempfile::tempdir().unwrap();
    let configs = dir.path().join("configs");
    std::fs::create_dir(&configs).unwrap();
    for seed in [1u64, 2] {
        write(
            &configs.join(format!("st{seed}.toml")),
            &format!("scenario = \"tcspc_selftest\"\nseed = {seed}\nduration_s = 100.0\n"),
        );
    }
    let out = homsync(
        &["batch", "--configs", "configs", "--jobs", "2", "--out", "batch_out"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for stem in ["st1", "st2"] {
        assert!(dir.path().join("batch_out").join(stem).join("summary.txt").exists());
    }
}

#[test]
fn batch_propagates_failure_codes() {
    let dir = tempfile::tempdir().unwrap();
    let configs = dir.path().join("configs");
    std::fs::create_dir(&configs).unwrap();
    write(&configs.join("ok.toml"), "scenario = \"tcspc_selftest\"\nduration_s = 50.0\n");
    write(&configs.join("broken.toml"), "scenario = \"nonsense\"\n");
    let out = homsync(&["batch", "--configs", "configs", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    // The good run still completed.
    assert!(dir.path().join("o/ok/summary.txt").exists());
}
