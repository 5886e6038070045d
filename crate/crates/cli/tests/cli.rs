use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sopf-droop"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("SOPF_DROOP_OUT")
        .output()
        .expect("spawn sopf-droop")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn epsilon_out_of_range_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["solve", "--forecast", "0.5,0.5", "--epsilon", "0.6"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("epsilon"), "{}", stderr(&o));
    assert!(!dir.path().join("sopf_solution.csv").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "epsilon = 0.05\nepsilonn = 0.1\n").unwrap();
    let o = run(&["validate", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("epsilonn"), "{}", stderr(&o));
}

#[test]
fn missing_archive_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.csv");
    let o = run(&["fit-zones", missing.to_str().unwrap(), "--p-max", "800"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nowhere.csv"), "{}", stderr(&o));
}

#[test]
fn archive_without_a_zone_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let archive = dir.path().join("lopsided.csv");
    let mut text = String::from("timestamp,forecast_mw,realized_mw\n");
    for i in 0..50 {
        // forecasts near 5% and 95% of 800 MW only
        let f = if i % 2 == 0 { 40.0 } else { 760.0 };
        text.push_str(&format!("2024-01-01T{:02}:{:02}:00,{f},{}\n", i / 60, i % 60, f + (i % 7) as f64 - 3.0));
    }
    std::fs::write(&archive, text).unwrap();
    let o = run(&["fit-zones", archive.to_str().unwrap(), "--p-max", "800"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Mid"), "{}", stderr(&o));
}

#[test]
fn fit_zones_recovers_a_synthetic_archive() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["synth-archive", "--p-max", "800", "--n", "400", "--seed", "3"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let archive = dir.path().join("archive.csv");
    let o = run(&["fit-zones", archive.to_str().unwrap(), "--p-max", "800"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let stats = std::fs::read_to_string(dir.path().join("zone_stats.csv")).unwrap();
    assert_eq!(stats.lines().count(), 4, "{stats}");
}

#[test]
fn synthetic_archive_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = run(&["synth-archive", "--p-max", "800", "--n", "50", "--seed", "9"], d.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("archive.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn solve_writes_its_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["solve", "--forecast", "0.5,0.5", "--mc-samples", "200"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["sopf_solution.csv", "pce_coefficients.csv", "droop.csv", "mc_audit.csv"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
}

#[test]
fn validate_accepts_the_builtin_system_and_rejects_junk() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["validate"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("ok:"));
    let junk = dir.path().join("net.json");
    std::fs::write(&junk, "{\"ac_buses\": 3}").unwrap();
    let o = run(&["validate", "--network", junk.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("net.json"), "{}", stderr(&o));
}

#[test]
fn benchmark_reports_are_complete_and_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = run(&["benchmark", "--n-per-zone", "1", "--seed", "5", "--jobs", "1"], d.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let files = ["cases.csv", "table.csv", "kopt_by_zone.csv", "trend.csv", "summary.txt", "calibration.csv"];
    for f in files {
        let (x, y) = (std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        assert!(!x.is_empty(), "{f} empty");
        assert_eq!(x, y, "{f} differs between identical runs");
    }
}
