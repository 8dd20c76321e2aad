use std::f64::consts::PI;

use dacph_core::config::Mode;
use dacph_core::dynamics::RobotParams;
use dacph_core::sim_engine::base_pose_along_path;
use dacph_core::{run, Error, RunLog, ScenarioConfig, Vector};

fn short(seed: u64, mode: Mode) -> ScenarioConfig {
    let mut cfg = ScenarioConfig {
        seed,
        mode,
        ..ScenarioConfig::default()
    };
    cfg.phases.warmup = 2.0;
    cfg.phases.linear = 3.0;
    cfg.phases.nonlinear = 3.0;
    cfg.phases.disturbed = 3.0;
    cfg
}

/// CSV bytes; the log holds NaN before the first learner loss, so `==` on
/// the values would never hold.
fn csv(log: &RunLog) -> Vec<u8> {
    let mut buf = Vec::new();
    log.write_csv(&mut buf).unwrap();
    buf
}

#[test]
fn same_seed_same_log() {
    let a = run(&short(11, Mode::Dac)).unwrap();
    let b = run(&short(11, Mode::Dac)).unwrap();
    assert!(csv(&a.log) == csv(&b.log));
    assert_eq!(a.summary.to_kv(), b.summary.to_kv());
    assert_eq!(a.events, b.events);
}

#[test]
fn seed_reaches_the_learner() {
    let a = run(&short(11, Mode::Dac)).unwrap();
    let b = run(&short(12, Mode::Dac)).unwrap();
    assert_ne!(a.log.column("b_hat11").unwrap(), b.log.column("b_hat11").unwrap());
}

#[test]
fn log_round_trips_through_csv() {
    let out = run(&short(5, Mode::Dac)).unwrap();
    let buf = csv(&out.log);
    let text = String::from_utf8(buf.clone()).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# dacph-runlog 1"));
    let header = lines.next().unwrap();
    for col in ["t", "phase", "q1", "alpha_err", "tau_obs2", "b_hat21", "dist_hat1", "proj_residual", "events"] {
        assert!(header.split(',').any(|c| c == col), "missing column {col}");
    }
    let back = RunLog::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.len(), out.log.len());
    assert!(csv(&back) == buf);
    let (a, b) = (back.column("q1").unwrap(), out.log.column("q1").unwrap());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn csv_with_foreign_schema_is_rejected() {
    let text = "# something else\nt,events\n";
    assert!(matches!(RunLog::read_csv(text.as_bytes()), Err(Error::Schema(_))));
}

#[test]
fn summary_lists_every_phase() {
    let out = run(&short(5, Mode::Dac)).unwrap();
    let kv = out.summary.to_kv();
    for key in ["rms_alpha_err", "effort", "b_est_ratio", "d_est_ratio", "max_hl_norm", "min_clearance"] {
        assert!(kv.lines().any(|l| l.starts_with(&format!("{key} = "))), "missing {key}");
    }
    for i in 0..4 {
        assert!(kv.contains(&format!("phase{i}.rms_alpha_err = ")));
    }
    assert_eq!(out.summary.phases.len(), 4);
}

#[test]
fn baseline_never_touches_the_estimate() {
    let out = run(&short(5, Mode::Baseline)).unwrap();
    let b11 = out.log.column("b_hat11").unwrap();
    assert!(b11.iter().all(|v| *v == b11[0]));
}

#[test]
fn momentum_stays_at_zero_in_closed_loop() {
    let out = run(&short(5, Mode::Dac)).unwrap();
    assert!(out.summary.max_hl_norm < 1e-8);
    assert!(out.summary.max_ha_norm < 1e-8);
    assert!(out.min_clearance > 0.0);
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = short(42, Mode::Baseline);
    let back = ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn partial_config_fills_defaults() {
    let cfg = ScenarioConfig::from_toml_str("seed = 3\n[phases]\nwarmup = 1.0\n").unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.phases.warmup, 1.0);
    assert_eq!(cfg.phases.linear, ScenarioConfig::default().phases.linear);
}

#[test]
fn config_errors_name_the_key() {
    let err = ScenarioConfig::from_toml_str("[learner]\nlearning_rate = 0.1\n").unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("learner"), "{err}");

    let err = ScenarioConfig::from_toml_str("[timing]\ndt = -1.0\n")
        .and_then(|c| c.validate().map(|_| c))
        .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn shipped_config_matches_defaults() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.toml");
    let cfg = ScenarioConfig::from_file(std::path::Path::new(path)).unwrap();
    assert_eq!(cfg, ScenarioConfig::default());
}

/// Joint ramps over `[0, 1]`: joint `first` from `a` to `b`, then the other.
fn two_leg(a: (f64, f64), b: (f64, f64), first: usize) -> impl Fn(f64) -> (Vector, Vector) {
    move |t| {
        let start = [a.0, a.1];
        let end = [b.0, b.1];
        let mut q = start;
        let mut qd = [0.0; 2];
        let (leg, s) = if t < 0.5 { (first, 2.0 * t) } else { (1 - first, 2.0 * t - 1.0) };
        if t >= 0.5 {
            q[first] = end[first];
        }
        q[leg] = start[leg] + (end[leg] - start[leg]) * s;
        qd[leg] = 2.0 * (end[leg] - start[leg]);
        (Vector::from_row_slice(&q), Vector::from_row_slice(&qd))
    }
}

#[test]
fn base_attitude_depends_on_joint_path() {
    let params = RobotParams::shipped();
    let (a, b) = ((0.5, -0.8), (1.6, 0.4));
    let (_, th_a) = base_pose_along_path(&params, two_leg(a, b, 0), 1.0, 1e-3).unwrap();
    let (_, th_b) = base_pose_along_path(&params, two_leg(a, b, 1), 1.0, 1e-3).unwrap();
    assert!((th_a - th_b).abs() > 1e-3, "{th_a} vs {th_b}");

    // a straight-line path there and back returns the base to where it was
    let there_back = move |t: f64| {
        let s = (PI * t).sin();
        let q = Vector::from_vec(vec![a.0 + (b.0 - a.0) * s, a.1 + (b.1 - a.1) * s]);
        let c = PI * (PI * t).cos();
        (q, Vector::from_vec(vec![(b.0 - a.0) * c, (b.1 - a.1) * c]))
    };
    let (r, th) = base_pose_along_path(&params, there_back, 1.0, 1e-3).unwrap();
    assert!(th.abs() < 1e-9 && r.norm() < 1e-9, "{r:?} {th}");
}
