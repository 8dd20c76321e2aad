use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dacph_core::{RunLog, ScenarioConfig};

const SHORT: &str = "seed = 3\n[phases]\nwarmup = 1.0\nlinear = 1.0\nnonlinear = 1.0\ndisturbed = 1.0\n";

fn dacph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dacph"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .expect("binary runs")
}

fn short_config(dir: &Path) -> String {
    let path = dir.join("short.toml");
    fs::write(&path, SHORT).unwrap();
    path.to_str().unwrap().to_string()
}

fn summary_keys(text: &str) -> Vec<&str> {
    text.lines().filter_map(|l| l.split(" = ").next()).collect()
}

#[test]
fn run_writes_log_summary_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = dacph(&["run", "--config", &cfg, "-o", out_dir.to_str().unwrap(), "--mode", "baseline"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let log = RunLog::read_csv(fs::read(out_dir.join("run.csv")).unwrap().as_slice()).unwrap();
    assert!(!log.is_empty());

    let summary = fs::read_to_string(out_dir.join("summary.txt")).unwrap();
    let keys = summary_keys(&summary);
    for k in ["mode", "seed", "rms_alpha_err", "effort", "phase3.rms_alpha_err"] {
        assert!(keys.contains(&k), "missing {k}");
    }
    assert!(summary.contains("mode = baseline"));

    // the effective config, overrides included
    let effective = ScenarioConfig::from_file(&out_dir.join("config.toml")).unwrap();
    assert_eq!(effective.seed, 3);
    assert_eq!(effective.phases.disturbed, 1.0);
}

#[test]
fn compare_writes_both_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let out_dir = dir.path().join("cmp");
    let out = dacph(&["compare", "--config", &cfg, "-o", out_dir.to_str().unwrap(), "--seed", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("dac.csv").is_file());
    assert!(out_dir.join("baseline.csv").is_file());
    let summary = fs::read_to_string(out_dir.join("summary.txt")).unwrap();
    let keys = summary_keys(&summary);
    for k in ["seed", "baseline.rms_alpha_err", "tracking_reduction_pct", "effort_increase_pct"] {
        assert!(keys.contains(&k), "missing {k}");
    }
    assert!(summary.starts_with("seed = 4\n"));
}

#[test]
fn sweep_writes_one_directory_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let out_dir = dir.path().join("sweep");
    let out = dacph(&["sweep", "--config", &cfg, "-o", out_dir.to_str().unwrap(), "--seeds", "1,2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for s in [1, 2] {
        let seed_dir = out_dir.join(format!("seed-{s}"));
        assert!(seed_dir.join("run.csv").is_file());
        assert!(seed_dir.join("summary.txt").is_file());
        assert_eq!(ScenarioConfig::from_file(&seed_dir.join("config.toml")).unwrap().seed, s);
    }
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[timing]\nstep = 0.001\n").unwrap();
    let out = dacph(&["run", "--config", path.to_str().unwrap(), "-o", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("timing"));
}
