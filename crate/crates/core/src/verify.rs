//! Invariant and property checks run by `dacph verify`.

use nalgebra::RowDVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{
    dh_dq, generalized_jacobian, hamiltonian, mass_matrix, normalized_momentum, DynamicsMatrices, RobotParams,
    SystemState, DMDQ_STEP,
};
use crate::error::Result;
use crate::learner::{loss_and_gradients, LearnerConfig, NetworkParams, ReplaySample};
use crate::lhs_control::task_pseudoinverse;
use crate::rhs_control::synthesize_gains;
use crate::sim_engine::{port_step_response, rk4_step};
use crate::{Matrix, ScenarioConfig, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, value: f64, limit: f64, what: &str) -> Check {
    Check {
        name,
        passed: value < limit,
        detail: format!("{what} = {value:.3e} (limit {limit:.0e})"),
    }
}

fn random_q(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    Vector::from_iterator(n, (0..n).map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)))
}

fn random_v(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vector {
    Vector::from_iterator(n, (0..n).map(|_| rng.random_range(-scale..scale)))
}

/// Relative drift of `H` over a torque-free run of `duration` seconds.
pub fn energy_drift(params: &RobotParams, q0: &Vector, p0: &Vector, duration: f64, dt: f64) -> Result<f64> {
    let mut s = SystemState::at_rest(q0.clone());
    s.p = p0.clone();
    let h0 = hamiltonian(&s.q, &s.p, params)?;
    let mut worst: f64 = 0.0;
    let steps = (duration / dt).round() as usize;
    for _ in 0..steps {
        s = rk4_step(&s, params, dt, |_, q, _, _| Vector::zeros(q.len()))?;
        let h = hamiltonian(&s.q, &s.p, params)?;
        worst = worst.max(((h - h0) / h0).abs());
    }
    Ok(worst)
}

/// Largest normalized `|sᵀ(Ṁ − 2C)s| / (‖s‖²(1 + ‖q̇‖))` over random samples.
pub fn skew_residual(params: &RobotParams, samples: usize, seed: u64) -> Result<f64> {
    let n = params.dof();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let q = random_q(&mut rng, n);
        let qd = random_v(&mut rng, n, 2.0);
        let s = random_v(&mut rng, n, 1.0);
        let dm = DynamicsMatrices::new(&q, params)?;
        let k = dm.mdot(&qd) - dm.coriolis(&qd) * 2.0;
        let r = s.dot(&(k * &s)).abs() / (s.norm_squared() * (1.0 + qd.norm()));
        worst = worst.max(r);
    }
    Ok(worst)
}

/// Agreement between the stored `∂M/∂qᵢ` and a recomputation with a doubled
/// step, relative to `max|∂M/∂q|`.
pub fn dmdq_consistency(params: &RobotParams, samples: usize, seed: u64) -> Result<f64> {
    let n = params.dof();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let q = random_q(&mut rng, n);
        let dm = DynamicsMatrices::new(&q, params)?;
        let scale = dm.dmdq.iter().map(|d| d.amax()).fold(0.0, f64::max).max(1e-12);
        for (i, d) in dm.dmdq.iter().enumerate() {
            let h = 2.0 * DMDQ_STEP;
            let mut qp = q.clone();
            qp[i] += h;
            let up = mass_matrix(&qp, 0.0, params)?;
            qp[i] = q[i] - h;
            let down = mass_matrix(&qp, 0.0, params)?;
            let again = (up - down) / (2.0 * h);
            worst = worst.max((d - again).amax() / scale);
        }
    }
    Ok(worst)
}

/// Relative error of `∂H/∂q` against central differences of `H`.
pub fn hamiltonian_gradient_error(params: &RobotParams, samples: usize, seed: u64) -> Result<f64> {
    let n = params.dof();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let q = random_q(&mut rng, n);
        let p = random_v(&mut rng, n, 0.05);
        let g = dh_dq(&q, &p, params)?;
        let mut fd = Vector::zeros(n);
        let h = 1e-5;
        for i in 0..n {
            let mut qp = q.clone();
            qp[i] += h;
            let up = hamiltonian(&qp, &p, params)?;
            qp[i] = q[i] - h;
            let down = hamiltonian(&qp, &p, params)?;
            fd[i] = (up - down) / (2.0 * h);
        }
        worst = worst.max((g - &fd).amax() / fd.amax().max(1e-12));
    }
    Ok(worst)
}

/// Largest `‖g_backprop − g_fd‖∞ / ‖g_fd‖∞` over random networks and samples.
pub fn learner_gradient_error(draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LearnerConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let mut net = NetworkParams::warm_start(2, 4, &cfg.b_init, &cfg.d_init);
        let flat: Vec<f64> = (0..net.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        net.set_flat(&flat)?;
        let sample = ReplaySample {
            x: random_v(&mut rng, 4, 1.0),
            u: random_v(&mut rng, 2, 1.0),
            qdot: random_v(&mut rng, 2, 1.0),
            tau_obs: random_v(&mut rng, 2, 1.0),
            t: 0.0,
        };
        let (_, grad) = loss_and_gradients(&net, &[&sample])?;
        let h = 1e-6;
        let mut fd = vec![0.0; flat.len()];
        let mut probe = net.clone();
        let mut p = flat.clone();
        for i in 0..flat.len() {
            p[i] = flat[i] + h;
            probe.set_flat(&p)?;
            let up = loss_and_gradients(&probe, &[&sample])?.0;
            p[i] = flat[i] - h;
            probe.set_flat(&p)?;
            let down = loss_and_gradients(&probe, &[&sample])?.0;
            p[i] = flat[i];
            fd[i] = (up - down) / (2.0 * h);
        }
        let scale = fd.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
        let err = grad.iter().zip(&fd).fold(0.0f64, |a, (g, f)| a.max((g - f).abs()));
        worst = worst.max(err / scale);
    }
    Ok(worst)
}

/// Largest violation of the task projector identities over random rows.
pub fn projector_residual(samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let d = RowDVector::from_iterator(2, (0..2).map(|_| rng.random_range(-2.0..2.0)));
        let (ddag, proj) = task_pseudoinverse(&d, 1e-4)?;
        let xi = random_v(&mut rng, 2, 1.0);
        worst = worst
            .max(((&d * &ddag)[0] - 1.0).abs())
            .max((&d * (&proj * &xi)).amax())
            .max((&proj * &proj - &proj).amax());
    }
    Ok(worst)
}

/// Largest normalized momentum along a short torque-driven trajectory.
pub fn momentum_residual(params: &RobotParams, duration: f64) -> Result<f64> {
    let mut s = SystemState::at_rest(Vector::from_vec(vec![0.5, -0.8]));
    let dt = 1e-3;
    let mut worst: f64 = 0.0;
    for k in 0..(duration / dt).round() as usize {
        let t = k as f64 * dt;
        s = rk4_step(&s, params, dt, |_, _, _, _| {
            Vector::from_vec(vec![0.02 * (2.0 * t).sin(), -0.015 * (3.0 * t).cos()])
        })?;
        let qd = mass_matrix(&s.q, 0.0, params)?
            .cholesky()
            .expect("positive definite")
            .solve(&s.p);
        let (hl, ha) = normalized_momentum(&s.q, &qd, s.theta0, params)?;
        worst = worst.max(hl).max(ha);
    }
    Ok(worst)
}

/// Time for `‖e_τ‖` to enter and stay within 2% of its initial value, and the
/// settling target `T₀`.
pub fn port_settling(cfg: &ScenarioConfig) -> Result<(f64, f64)> {
    let step = Vector::from_vec(vec![0.01, -0.005]);
    let trace = port_step_response(cfg, &step, None, 0.2)?;
    let e0 = trace.e_norm[0];
    let last_out = trace.e_norm.iter().rposition(|e| *e > 0.02 * e0).unwrap_or(0);
    let settle = trace.t.get(last_out + 1).copied().unwrap_or(f64::INFINITY);
    Ok((settle, trace.gains.t0))
}

/// Runs the suite on the shipped robot.
pub fn run_all(cfg: &ScenarioConfig) -> Result<Vec<Check>> {
    let params = &cfg.robot;
    let mut out = Vec::new();
    out.push(check(
        "energy conservation (5 s, tau = 0)",
        energy_drift(params, &Vector::from_vec(vec![0.5, -0.8]), &Vector::from_vec(vec![0.01, -0.02]), 5.0, 1e-3)?,
        1e-6,
        "max |dH|/H",
    ));
    out.push(check("momentum conservation (2 s, driven)", momentum_residual(params, 2.0)?, 1e-8, "max normalized momentum"));
    out.push(check("skew symmetry of Mdot - 2C", skew_residual(params, 1000, 1)?, 1e-6, "max normalized residual"));
    out.push(check("dM/dq self-consistency", dmdq_consistency(params, 100, 2)?, 1e-5, "max relative difference"));
    out.push(check("dH/dq against finite differences", hamiltonian_gradient_error(params, 100, 3)?, 1e-6, "max relative error"));
    out.push(check("learner gradient against finite differences", learner_gradient_error(20, 4)?, 1e-5, "max relative error"));
    out.push(check("task projector identities", projector_residual(1000, 5)?, 1e-10, "max residual"));

    let kin = generalized_jacobian(&Vector::from_vec(cfg.initial.q.clone()), 0.0, params)?;
    out.push(Check {
        name: "task row away from singularity at start",
        passed: kin.task_row.norm() > cfg.lhs.singularity_threshold,
        detail: format!("|D| = {:.3e}", kin.task_row.norm()),
    });

    let (settle, t0) = port_settling(cfg)?;
    out.push(Check {
        name: "port error settles within T0",
        passed: settle <= t0,
        detail: format!("2% settling {settle:.4} s, T0 = {t0:.4} s"),
    });

    let singular = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
    let frozen = synthesize_gains(
        &singular,
        &(Matrix::identity(2, 2) * 0.1),
        &Matrix::zeros(2, 4),
        &cfg.lhs.kd_matrix(2),
        0.005,
        1.0,
        &cfg.rhs,
        cfg.timing.dt,
    );
    out.push(Check {
        name: "singular input map freezes gains",
        passed: matches!(frozen, Err(crate::Error::GainFreeze(_))),
        detail: "det(B0) = 0".into(),
    });
    Ok(out)
}
