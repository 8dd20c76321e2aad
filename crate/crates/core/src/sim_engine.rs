//! Closed-loop simulation: RK4 plant integration with zero-order-hold inputs,
//! multi-rate scheduling of the controllers, phase clock and logging.
//!
//! Per plant step the order is fixed: measure, outer loop (if due), learner
//! (if due), gain synthesis (if due), inner loop, integrate.

use std::collections::BTreeMap;

use nalgebra::Vector2;

use crate::dynamics::{
    base_velocity, generalized_jacobian, mass_matrix, normalized_momentum, DynamicsMatrices,
    RobotParams, SystemState,
};
use crate::error::{Error, Result};
use crate::learner::Learner;
use crate::lhs_control::{min_clearance, LhsController, LhsOutput};
use crate::metrics::{summarize, RunSummary};
use crate::rhs_control::{
    compute_j0, integrator_step, ChiEstimator, GainScheduler, GainSynthesis, GainUpdate, PortObserver,
};
use crate::runlog::RunLog;
use crate::truth_plant::Phase;
use crate::{dynamics, ScenarioConfig, Vector};

pub use crate::config::Mode;

/// Time derivative of the integrated state.
#[derive(Debug, Clone)]
pub struct Flow {
    pub qdot: Vector,
    pub pdot: Vector,
    pub r0dot: Vector2<f64>,
    pub theta0dot: f64,
}

/// `q̇ = M⁻¹p`, `ṗ = −∂H/∂q + τ`, base rates from the momentum constraint.
///
/// `port(t, q, p, q̇)` returns the realized `τ`.
pub fn flow<F>(state: &SystemState, params: &RobotParams, port: &mut F) -> Result<Flow>
where
    F: FnMut(f64, &Vector, &Vector, &Vector) -> Vector,
{
    flow_at(state, &DynamicsMatrices::new(&state.q, params)?, params, port)
}

/// [`flow`] with the dynamics matrices at `state.q` already evaluated.
fn flow_at<F>(state: &SystemState, dm: &DynamicsMatrices, params: &RobotParams, port: &mut F) -> Result<Flow>
where
    F: FnMut(f64, &Vector, &Vector, &Vector) -> Vector,
{
    let qdot = dm.cholesky()?.solve(&state.p);
    let tau = port(state.t, &state.q, &state.p, &qdot);
    let pdot = tau - dm.dh_dq_from_qdot(&qdot);
    let (r0dot, theta0dot) = base_velocity(&state.q, &qdot, state.theta0, params)?;
    Ok(Flow {
        qdot,
        pdot,
        r0dot,
        theta0dot,
    })
}

fn advance(state: &SystemState, f: &Flow, h: f64) -> SystemState {
    SystemState {
        q: &state.q + &f.qdot * h,
        p: &state.p + &f.pdot * h,
        r0: state.r0 + f.r0dot * h,
        theta0: state.theta0 + f.theta0dot * h,
        t: state.t + h,
    }
}

/// Classical fourth-order Runge–Kutta step; every stage re-evaluates the
/// dynamics and the port.
pub fn rk4_step<F>(state: &SystemState, params: &RobotParams, dt: f64, port: F) -> Result<SystemState>
where
    F: FnMut(f64, &Vector, &Vector, &Vector) -> Vector,
{
    rk4_step_at(state, &DynamicsMatrices::new(&state.q, params)?, params, dt, port)
}

/// [`rk4_step`] reusing the dynamics matrices at the start point.
pub fn rk4_step_at<F>(
    state: &SystemState,
    dm: &DynamicsMatrices,
    params: &RobotParams,
    dt: f64,
    mut port: F,
) -> Result<SystemState>
where
    F: FnMut(f64, &Vector, &Vector, &Vector) -> Vector,
{
    let k1 = flow_at(state, dm, params, &mut port)?;
    let k2 = flow(&advance(state, &k1, 0.5 * dt), params, &mut port)?;
    let k3 = flow(&advance(state, &k2, 0.5 * dt), params, &mut port)?;
    let k4 = flow(&advance(state, &k3, dt), params, &mut port)?;
    let w = dt / 6.0;
    let next = SystemState {
        q: &state.q + (&k1.qdot + (&k2.qdot + &k3.qdot) * 2.0 + &k4.qdot) * w,
        p: &state.p + (&k1.pdot + (&k2.pdot + &k3.pdot) * 2.0 + &k4.pdot) * w,
        r0: state.r0 + (k1.r0dot + (k2.r0dot + k3.r0dot) * 2.0 + k4.r0dot) * w,
        theta0: state.theta0 + (k1.theta0dot + 2.0 * (k2.theta0dot + k3.theta0dot) + k4.theta0dot) * w,
        t: state.t + dt,
    };
    if !next.is_finite() {
        return Err(Error::NumericAbort {
            t: state.t,
            reason: format!("non-finite state after step from q = {}, p = {}", fmt_vec(&state.q), fmt_vec(&state.p)),
        });
    }
    Ok(next)
}

fn fmt_vec(v: &Vector) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6e}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Plant-step indices at which each phase begins, plus the final step.
fn phase_bounds(cfg: &ScenarioConfig) -> [usize; 5] {
    let dt = cfg.timing.dt;
    let mut bounds = [0usize; 5];
    let mut acc = 0.0;
    for (i, d) in cfg.phases.durations().iter().enumerate() {
        acc += d;
        bounds[i + 1] = (acc / dt).round() as usize;
    }
    bounds
}

fn initial_state(cfg: &ScenarioConfig) -> SystemState {
    SystemState {
        q: Vector::from_vec(cfg.initial.q.clone()),
        p: Vector::from_vec(cfg.initial.p.clone()),
        r0: Vector2::new(cfg.initial.r0[0], cfg.initial.r0[1]),
        theta0: cfg.initial.theta0,
        t: 0.0,
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub mode: Mode,
    pub log: RunLog,
    pub summary: RunSummary,
    pub final_state: SystemState,
    /// Occurrences of each event tag.
    pub events: BTreeMap<String, usize>,
    /// Smallest clearance to the base disc over every plant step.
    pub min_clearance: f64,
    /// Largest projector-identity residual over every outer-loop step.
    pub max_proj_residual: f64,
    /// Smallest learned dissipation entry over every learner step.
    pub min_d_hat: f64,
    pub lambda_m: (f64, f64),
}

/// Workspace bounds of `eig(M)` used by the gain synthesis.
pub fn workspace_inertia_bounds(params: &RobotParams) -> Result<(f64, f64)> {
    dynamics::inertia_bounds(params, 100)
}

/// Executes the configured scenario.
pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let lam = workspace_inertia_bounds(&cfg.robot)?;
    run_with_bounds(cfg, lam)
}

/// As [`run`], with precomputed workspace inertia bounds.
pub fn run_with_bounds(cfg: &ScenarioConfig, lambda_m: (f64, f64)) -> Result<RunOutput> {
    run_keep_log(cfg, lambda_m).map_err(|(e, _)| e)
}

/// As [`run_with_bounds`], but a failed run hands back the rows logged
/// before the error.
pub fn run_keep_log(cfg: &ScenarioConfig, lambda_m: (f64, f64)) -> std::result::Result<RunOutput, (Error, RunLog)> {
    let mut log = RunLog::new(cfg.dof());
    simulate(cfg, lambda_m, &mut log).map_err(|e| (e, log))
}

fn simulate(cfg: &ScenarioConfig, lambda_m: (f64, f64), log: &mut RunLog) -> Result<RunOutput> {
    cfg.validate()?;
    let params = &cfg.robot;
    let n = cfg.dof();
    let dt = cfg.timing.dt;
    let dac = cfg.mode == Mode::Dac;
    let truth = cfg.truth()?;
    let (lhs_every, learn_every, gain_every) = (cfg.lhs_every(), cfg.learn_every(), cfg.gain_every());
    let dt_lhs = lhs_every as f64 * dt;
    let bounds = phase_bounds(cfg);
    let total_steps = bounds[4];

    let mut lhs = LhsController::new(&cfg.lhs, &cfg.apf, &cfg.reference, n)?;
    let mut learner = Learner::new(&cfg.learner, n, cfg.seed)?;
    let mut sched = GainScheduler::new(&cfg.rhs, lhs.kd(), lambda_m.0, dt, &truth.b_nom, &truth.d_nom)?;
    let mut chi_est = ChiEstimator::new(cfg.rhs.chi_window, cfg.rhs.chi_decay, cfg.rhs.chi_min);
    let mut observer = PortObserver::new(cfg.rhs.observer_cutoff_hz);

    let mut state = initial_state(cfg);
    let mut events: BTreeMap<String, usize> = BTreeMap::new();
    let mut pending: Vec<String> = Vec::new();
    let mut note = |tag: &str, pending: &mut Vec<String>| {
        *events.entry(tag.to_string()).or_default() += 1;
        pending.push(tag.to_string());
    };

    let mut u = Vector::zeros(n);
    let mut tau_req = Vector::zeros(n);
    let mut tau_obs = Vector::zeros(n);
    let mut e_prev: Option<Vector> = None;
    let mut last_lhs: Option<LhsOutput> = None;
    let mut prev_mid: Option<(Vector, Vector, Vector)> = None;
    let mut phase = Phase::Warmup;
    let mut phase_start = 0.0;
    let mut floored_warned = false;

    let mut min_clear = f64::INFINITY;
    let mut max_proj: f64 = 0.0;
    let mut min_d_hat = f64::INFINITY;

    for k in 0..total_steps {
        let t = k as f64 * dt;
        state.t = t;
        let ph = (0..4).rev().find(|&i| k >= bounds[i]).expect("step 0 is in a phase");
        let ph = Phase::from_index(ph).expect("four phases");
        if ph != phase || k == 0 {
            phase = ph;
            phase_start = bounds[ph.index()] as f64 * dt;
            floored_warned = false;
            note(&format!("phase:{}", ph.index()), &mut pending);
        }

        // measure
        let dm = DynamicsMatrices::new(&state.q, params)?;
        let qdot = dm.cholesky()?.solve(&state.p);
        let midpoint = prev_mid.replace((state.q.clone(), state.p.clone(), qdot.clone()));
        if let Some(obs) = observer.observe(&state.q, &qdot, dt, params)? {
            tau_obs = obs;
        }
        min_clear = min_clear.min(min_clearance(&state.q, params, &cfg.apf));

        if truth.true_matrices(&state.q, &state.p, phase).floored && !floored_warned {
            log::warn!("true dissipation floored at zero at t = {t:.3} s");
            floored_warned = true;
            note("dissipation_floor", &mut pending);
        }

        // outer loop
        if k % lhs_every == 0 {
            let chi = if dac { chi_est.update() } else { 0.0 };
            let kin = generalized_jacobian(&state.q, state.theta0, params)?;
            let out = lhs.step(t, &state.q, &qdot, state.alpha(), &kin, &dm, params, chi, dt_lhs)?;
            if out.singular {
                note("singular", &mut pending);
            }
            max_proj = max_proj.max(out.proj_residual);
            tau_req = out.tau_req.clone();
            last_lhs = Some(out);
        }

        // learner
        if dac && k % learn_every == 0 {
            if let (Some((q0, p0, qd0)), true) = (&midpoint, k > 0) {
                let qm = (&state.q + q0) * 0.5;
                let pm = (&state.p + p0) * 0.5;
                let qdm = (&qdot + qd0) * 0.5;
                learner.push(&qm, &pm, &u, &qdm, &tau_obs, t)?;
            }
            learner.online_update()?;
            let (_, d_hat) = learner.estimate(&state.q, &state.p)?;
            min_d_hat = min_d_hat.min(d_hat.diagonal().min());
        }

        // gain synthesis
        if dac && k % gain_every == 0 && k > 0 {
            let (b_hat, d_hat) = learner.estimate(&state.q, &state.p)?;
            let j0 = compute_j0(&learner, &state.q, &state.p, &u, &qdot, cfg.rhs.j0_step)?;
            if let GainUpdate::Frozen(reason) = sched.update(t, &b_hat, &d_hat, &j0)? {
                log::warn!("gain synthesis frozen at t = {t:.3} s: {reason}");
                note("gain_freeze", &mut pending);
            }
        }

        // inner loop
        let e = &tau_req - &tau_obs;
        if dac {
            integrator_step(&mut u, &e, e_prev.as_ref(), sched.gains(), dt, cfg.rhs.trapezoidal)?;
            sched.slew();
            // settled error only: the transient after each new request is the
            // loop doing its job, not residual mismatch
            if (k + 1) % lhs_every == 0 {
                chi_est.push(t, e.norm());
            }
        } else {
            u.copy_from(&tau_req);
        }

        if k % cfg.timing.log_every == 0 {
            let lhs_out = last_lhs.as_ref().expect("outer loop runs at step 0");
            let row = log_row(
                cfg, &state, &qdot, phase, phase_start, lhs_out, &tau_req, &tau_obs, &e, &u,
                if dac { chi_est.chi() } else { 0.0 },
                dac.then(|| sched.committed()),
                sched.gains(),
                dac.then_some(&learner),
                &truth,
            )?;
            log.push(row, pending.join(";"))?;
            pending.clear();
        }
        e_prev = Some(e);

        let t_local0 = t - phase_start;
        let t_base = t;
        state = rk4_step_at(&state, &dm, params, dt, |ts, q, p, qd| {
            truth.realized_port(&u, q, p, qd, t_local0 + (ts - t_base), phase)
        })?;
    }

    let summary = summarize(log)?;
    Ok(RunOutput {
        mode: cfg.mode,
        log: std::mem::replace(log, RunLog::new(n)),
        summary,
        final_state: state,
        events,
        min_clearance: min_clear,
        max_proj_residual: max_proj,
        min_d_hat,
        lambda_m,
    })
}

#[allow(clippy::too_many_arguments)]
fn log_row(
    cfg: &ScenarioConfig,
    state: &SystemState,
    qdot: &Vector,
    phase: Phase,
    phase_start: f64,
    lhs: &LhsOutput,
    tau_req: &Vector,
    tau_obs: &Vector,
    e: &Vector,
    u: &Vector,
    chi: f64,
    gains: Option<&GainSynthesis>,
    k: &Vector,
    learner: Option<&Learner>,
    truth: &crate::truth_plant::TruthModel,
) -> Result<Vec<f64>> {
    let params = &cfg.robot;
    let n = state.q.len();
    let tm = truth.true_matrices(&state.q, &state.p, phase);
    let (b_hat, d_hat) = match learner {
        Some(l) => l.estimate(&state.q, &state.p)?,
        None => (truth.b_nom.clone(), truth.d_nom.clone()),
    };
    let (hl, ha) = normalized_momentum(&state.q, qdot, state.theta0, params)?;
    let d = truth.disturbance(state.t - phase_start, phase);
    let sl = &lhs.sliding;

    let mut row = vec![state.t, phase.index() as f64];
    row.extend(state.q.iter());
    row.extend(state.p.iter());
    row.extend([state.r0.x, state.r0.y, state.theta0, state.alpha(), sl.alpha_d, state.alpha() - sl.alpha_d]);
    // s at this plant step against the held reference velocity
    row.extend((qdot - &sl.nu).iter());
    let s = qdot - &sl.nu;
    let m = mass_matrix(&state.q, state.theta0, params)?;
    row.push(0.5 * s.dot(&(&m * &s)));
    for v in [tau_req, tau_obs, e, u, &d] {
        row.extend(v.iter());
    }
    row.push(chi);
    row.push(gains.map_or(0.0, |g| g.c));
    row.extend(k.iter());
    row.push(learner.map_or(f64::NAN, |l| l.last_loss()));
    row.push((&b_hat - &tm.b).norm());
    row.push((&d_hat - &tm.d).norm());
    row.push((&truth.b_nom - &tm.b).norm());
    row.push((&truth.d_nom - &tm.d).norm());
    for mat in [&tm.b, &b_hat] {
        for i in 0..n {
            for j in 0..n {
                row.push(mat[(i, j)]);
            }
        }
    }
    row.extend(tm.d.diagonal().iter());
    row.extend(d_hat.diagonal().iter());
    match learner {
        Some(l) => row.extend(l.offset().iter()),
        None => row.extend(std::iter::repeat_n(0.0, n)),
    }
    row.extend([hl, ha, min_clearance(&state.q, params, &cfg.apf), lhs.proj_residual]);
    Ok(row)
}

/// One sample of [`ideal_actuation_run`].
#[derive(Debug, Clone)]
pub struct IdealSample {
    pub t: f64,
    pub v: f64,
    pub alpha_err: f64,
    pub s: Vector,
    pub nu: Vector,
    pub tau_req: Vector,
}

/// Closed loop with ideal actuation: the realized port equals the requested
/// one (`d = 0`, `χ = 0`). The outer loop runs every `lhs_every` plant steps
/// and a sample is taken at each outer-loop step.
pub fn ideal_actuation_run(cfg: &ScenarioConfig, duration: f64, lhs_every: usize) -> Result<Vec<IdealSample>> {
    cfg.validate()?;
    let params = &cfg.robot;
    let n = cfg.dof();
    let dt = cfg.timing.dt;
    let mut lhs = LhsController::new(&cfg.lhs, &cfg.apf, &cfg.reference, n)?;
    let mut state = initial_state(cfg);
    let steps = (duration / dt).round() as usize;
    let mut tau = Vector::zeros(n);
    let mut out = Vec::new();
    for k in 0..=steps {
        let t = k as f64 * dt;
        state.t = t;
        if k % lhs_every == 0 {
            let dm = DynamicsMatrices::new(&state.q, params)?;
            let qdot = dm.cholesky()?.solve(&state.p);
            let kin = generalized_jacobian(&state.q, state.theta0, params)?;
            let o = lhs.step(t, &state.q, &qdot, state.alpha(), &kin, &dm, params, 0.0, lhs_every as f64 * dt)?;
            tau = o.tau_req.clone();
            out.push(IdealSample {
                t,
                v: o.sliding.v,
                alpha_err: o.sliding.alpha_err,
                s: o.sliding.s,
                nu: o.sliding.nu,
                tau_req: o.tau_req,
            });
        }
        if k < steps {
            state = rk4_step(&state, params, dt, |_, _, _, _| tau.clone())?;
        }
    }
    Ok(out)
}

/// Trace of [`port_step_response`].
#[derive(Debug, Clone)]
pub struct PortStepTrace {
    pub t: Vec<f64>,
    pub e_norm: Vec<f64>,
    pub u: Vec<Vector>,
    pub gains: GainSynthesis,
}

/// Inner loop alone under a constant requested port, starting from rest with
/// `u = 0`, on the warm-up plant plus an optional constant disturbance.
/// Gains come from the synthesis at the nominal matrices.
pub fn port_step_response(
    cfg: &ScenarioConfig,
    tau_req: &Vector,
    disturbance: Option<&Vector>,
    duration: f64,
) -> Result<PortStepTrace> {
    cfg.validate()?;
    let params = &cfg.robot;
    let n = cfg.dof();
    let dt = cfg.timing.dt;
    let truth = cfg.truth()?;
    let lam = workspace_inertia_bounds(params)?;
    let kd = cfg.lhs.kd_matrix(n);
    let sched = GainScheduler::new(&cfg.rhs, &kd, lam.0, dt, &truth.b_nom, &truth.d_nom)?;
    let k = sched.gains().clone();
    let d = disturbance.cloned().unwrap_or_else(|| Vector::zeros(n));

    let mut observer = PortObserver::new(cfg.rhs.observer_cutoff_hz);
    let mut state = initial_state(cfg);
    let mut u = Vector::zeros(n);
    let mut tau_obs = Vector::zeros(n);
    let mut e_prev: Option<Vector> = None;
    let mut trace = PortStepTrace {
        t: Vec::new(),
        e_norm: Vec::new(),
        u: Vec::new(),
        gains: sched.committed().clone(),
    };
    let steps = (duration / dt).round() as usize;
    for step in 0..steps {
        let t = step as f64 * dt;
        state.t = t;
        let qdot = mass_matrix(&state.q, 0.0, params)?
            .cholesky()
            .ok_or(Error::NonFinite("mass matrix (not positive definite)"))?
            .solve(&state.p);
        if let Some(obs) = observer.observe(&state.q, &qdot, dt, params)? {
            tau_obs = obs;
        }
        let e = tau_req - &tau_obs;
        integrator_step(&mut u, &e, e_prev.as_ref(), &k, dt, cfg.rhs.trapezoidal)?;
        trace.t.push(t);
        trace.e_norm.push(e.norm());
        trace.u.push(u.clone());
        e_prev = Some(e);
        state = rk4_step(&state, params, dt, |_, q, p, qd| {
            truth.realized_port(&u, q, p, qd, 0.0, Phase::Warmup) + &d
        })?;
    }
    Ok(trace)
}

/// Integrates the base pose along a prescribed joint path `t ↦ (q, q̇)` over
/// `[0, duration]` and returns the final `(r0, θ0)`.
pub fn base_pose_along_path<P>(
    params: &RobotParams,
    path: P,
    duration: f64,
    dt: f64,
) -> Result<(Vector2<f64>, f64)>
where
    P: Fn(f64) -> (Vector, Vector),
{
    let mut r0 = Vector2::zeros();
    let mut theta0 = 0.0;
    let steps = (duration / dt).round() as usize;
    let h = duration / steps as f64;
    let rate = |t: f64, theta0: f64| -> Result<(Vector2<f64>, f64)> {
        let (q, qd) = path(t);
        base_velocity(&q, &qd, theta0, params)
    };
    for k in 0..steps {
        let t = k as f64 * h;
        let (v1, w1) = rate(t, theta0)?;
        let (v2, w2) = rate(t + 0.5 * h, theta0 + 0.5 * h * w1)?;
        let (v3, w3) = rate(t + 0.5 * h, theta0 + 0.5 * h * w2)?;
        let (v4, w4) = rate(t + h, theta0 + h * w3)?;
        r0 += (v1 + (v2 + v3) * 2.0 + v4) * (h / 6.0);
        theta0 += (w1 + 2.0 * (w2 + w3) + w4) * (h / 6.0);
    }
    Ok((r0, theta0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::hamiltonian;
    use nalgebra::dvector;

    #[test]
    fn zero_port_keeps_rest() {
        let params = RobotParams::shipped();
        let s = SystemState::at_rest(dvector![0.5, -0.8]);
        let next = rk4_step(&s, &params, 1e-3, |_, _, _, _| Vector::zeros(2)).unwrap();
        assert_eq!(next.q, s.q);
        assert_eq!(next.p, s.p);
        assert_eq!(next.theta0, 0.0);
    }

    #[test]
    fn short_free_motion_conserves_energy() {
        let params = RobotParams::shipped();
        let mut s = SystemState::at_rest(dvector![0.5, -0.8]);
        s.p = dvector![0.01, -0.02];
        let h0 = hamiltonian(&s.q, &s.p, &params).unwrap();
        for _ in 0..500 {
            s = rk4_step(&s, &params, 1e-3, |_, _, _, _| Vector::zeros(2)).unwrap();
        }
        let h1 = hamiltonian(&s.q, &s.p, &params).unwrap();
        assert!(((h1 - h0) / h0).abs() < 1e-9);
    }

    #[test]
    fn constant_joint_path_leaves_base_still() {
        let params = RobotParams::shipped();
        let (r0, th) = base_pose_along_path(
            &params,
            |_| (dvector![0.3, 0.2], Vector::zeros(2)),
            1.0,
            1e-2,
        )
        .unwrap();
        assert_eq!(th, 0.0);
        assert_eq!(r0, Vector2::zeros());
    }

    #[test]
    fn zero_length_phases_log_nothing() {
        let mut cfg = ScenarioConfig::default();
        cfg.phases.warmup = 0.0;
        cfg.phases.linear = 0.0;
        cfg.phases.nonlinear = 0.0;
        cfg.phases.disturbed = 0.0;
        let out = run_with_bounds(&cfg, (0.005, 0.045)).unwrap();
        assert!(out.log.is_empty());
    }
}
