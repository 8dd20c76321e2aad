//! Inner loop: port observation, decentralized integral control of the port
//! error, and synthesis of the integrator gains.

use std::collections::VecDeque;

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsMatrices, RobotParams};
use crate::error::{Error, Result};
use crate::learner::Learner;
use crate::{Matrix, Vector};

type CMatrix = nalgebra::DMatrix<Complex<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RhsConfig {
    /// Required ratio between the slowest port-error rate and the fastest
    /// sliding mode.
    pub td: f64,
    pub safety: f64,
    pub beta_cap: f64,
    pub chi_window: f64,
    pub chi_decay: f64,
    pub chi_min: f64,
    /// Time constant of the first-order slew towards freshly committed gains (s).
    pub gain_slew_tau: f64,
    pub freeze_timeout: f64,
    /// Cutoff of the optional low-pass on the acceleration estimate; 0 disables it.
    pub observer_cutoff_hz: f64,
    /// Upper bound on the per-step loop gain `k_p·Re(λ_p)·dt`.
    pub max_loop_gain: f64,
    pub trapezoidal: bool,
    pub det_min: f64,
    /// Syntheses with a mode of `B̂₀` whose real part is at or below this are
    /// frozen. Near the loop-gain limit an underestimated mode overdrives the
    /// real channel.
    pub mode_floor: f64,
    pub cond_max: f64,
    /// Entries below this fraction of their family's largest nominal entry are
    /// left out of the uncertainty ratio.
    pub beta_entry_floor: f64,
    pub j0_step: f64,
}

impl Default for RhsConfig {
    fn default() -> Self {
        Self {
            td: 2.0,
            safety: 1.1,
            beta_cap: 10f64.exp(),
            chi_window: 1.0,
            chi_decay: 0.995,
            chi_min: 1e-4,
            gain_slew_tau: 2.0,
            freeze_timeout: 10.0,
            observer_cutoff_hz: 0.0,
            max_loop_gain: 0.95,
            trapezoidal: false,
            det_min: 1e-8,
            mode_floor: 0.5,
            cond_max: 1e8,
            beta_entry_floor: 1e-6,
            j0_step: 1e-5,
        }
    }
}

impl RhsConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rhs.td", self.td),
            ("rhs.chi_window", self.chi_window),
            ("rhs.chi_min", self.chi_min),
            ("rhs.gain_slew_tau", self.gain_slew_tau),
            ("rhs.freeze_timeout", self.freeze_timeout),
            ("rhs.det_min", self.det_min),
            ("rhs.cond_max", self.cond_max),
            ("rhs.j0_step", self.j0_step),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be > 0"));
            }
        }
        if !(self.safety >= 1.0) {
            return Err(Error::config("rhs.safety", "must be >= 1"));
        }
        if !(self.beta_cap >= 1.0) {
            return Err(Error::config("rhs.beta_cap", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.chi_decay) {
            return Err(Error::config("rhs.chi_decay", "must lie in [0, 1]"));
        }
        if !(self.mode_floor >= 0.0 && self.mode_floor.is_finite()) {
            return Err(Error::config("rhs.mode_floor", "must be >= 0"));
        }
        if !(self.observer_cutoff_hz >= 0.0) {
            return Err(Error::config("rhs.observer_cutoff_hz", "must be >= 0"));
        }
        if !(self.max_loop_gain > 0.0 && self.max_loop_gain < 2.0) {
            return Err(Error::config("rhs.max_loop_gain", "must lie in (0, 2)"));
        }
        Ok(())
    }
}

/// `τ̆ = M(q)q̈ + C(q, q̇)q̇`.
pub fn observe_port(q: &Vector, qdot: &Vector, qddot: &Vector, params: &RobotParams) -> Result<Vector> {
    let dm = DynamicsMatrices::new(q, params)?;
    Ok(&dm.m * qddot + dm.coriolis(qdot) * qdot)
}

/// Reconstructs the realized port from successive measurements of `(q, q̇)`.
///
/// The acceleration is the difference quotient of `q̇` over one plant step and
/// the model is evaluated at the midpoint of the step.
#[derive(Debug, Clone)]
pub struct PortObserver {
    cutoff_hz: f64,
    prev: Option<(Vector, Vector)>,
    qdd: Option<Vector>,
}

impl PortObserver {
    pub fn new(cutoff_hz: f64) -> Self {
        Self {
            cutoff_hz,
            prev: None,
            qdd: None,
        }
    }

    pub fn reset(&mut self) {
        self.prev = None;
        self.qdd = None;
    }

    /// Returns `None` until two samples are available.
    pub fn observe(&mut self, q: &Vector, qdot: &Vector, dt: f64, params: &RobotParams) -> Result<Option<Vector>> {
        let Some((q0, qd0)) = self.prev.replace((q.clone(), qdot.clone())) else {
            return Ok(None);
        };
        let raw = (qdot - &qd0) / dt;
        let qdd = match (&mut self.qdd, self.cutoff_hz > 0.0) {
            (Some(f), true) => {
                let a = 1.0 - (-2.0 * std::f64::consts::PI * self.cutoff_hz * dt).exp();
                *f += (raw - &*f) * a;
                f.clone()
            }
            _ => {
                self.qdd = Some(raw.clone());
                raw
            }
        };
        let q_mid = (q + q0) * 0.5;
        let qd_mid = (qdot + qd0) * 0.5;
        observe_port(&q_mid, &qd_mid, &qdd, params).map(Some)
    }
}

/// `uᵢ ← uᵢ + kᵢ·e_τ,ᵢ·dt`; the trapezoidal variant averages the current and
/// previous error.
pub fn integrator_step(u: &mut Vector, e: &Vector, e_prev: Option<&Vector>, k: &Vector, dt: f64, trapezoidal: bool) -> Result<()> {
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("port error"));
    }
    for i in 0..u.len() {
        let ei = match (trapezoidal, e_prev) {
            (true, Some(p)) => 0.5 * (e[i] + p[i]),
            _ => e[i],
        };
        u[i] += k[i] * ei * dt;
    }
    Ok(())
}

/// Online bound `χ ≥ ‖e_τ‖`: sliding-window maximum with slow decay.
#[derive(Debug, Clone)]
pub struct ChiEstimator {
    window: f64,
    decay: f64,
    floor: f64,
    samples: VecDeque<(f64, f64)>,
    chi: f64,
}

impl ChiEstimator {
    pub fn new(window: f64, decay: f64, floor: f64) -> Self {
        Self {
            window,
            decay,
            floor,
            samples: VecDeque::new(),
            chi: floor,
        }
    }

    pub fn push(&mut self, t: f64, norm: f64) {
        // ring buffer of (t, ‖e_τ‖), trimmed from the front
        self.samples.push_back((t, norm));
        while let Some(&(t0, _)) = self.samples.front() {
            if t - t0 > self.window {
                self.samples.pop_front();
            } else {
                break;
            }
        }
    }

    /// Called once per outer-loop step.
    pub fn update(&mut self) -> f64 {
        let window_max = self.samples.iter().map(|s| s.1).fold(0.0, f64::max);
        self.chi = (self.chi * self.decay).max(window_max).max(self.floor);
        self.chi
    }

    pub fn chi(&self) -> f64 {
        self.chi
    }
}

/// `Ĵ₀ = ∂/∂x (D̂(x)q̇₀ − B̂(x)u₀)` by central differences over `x = [q; p]`.
pub fn compute_j0(learner: &Learner, q0: &Vector, p0: &Vector, u0: &Vector, qd0: &Vector, step: f64) -> Result<Matrix> {
    let n = q0.len();
    let map = |q: &Vector, p: &Vector| -> Result<Vector> {
        let (b, d) = learner.estimate(q, p)?;
        Ok(d * qd0 - b * u0)
    };
    let mut j0 = Matrix::zeros(n, 2 * n);
    let (mut q, mut p) = (q0.clone(), p0.clone());
    for col in 0..2 * n {
        let slot = |q: &mut Vector, p: &mut Vector, v: f64| {
            if col < n {
                q[col] = q0[col] + v;
            } else {
                p[col - n] = p0[col - n] + v;
            }
        };
        slot(&mut q, &mut p, step);
        let up = map(&q, &p)?;
        slot(&mut q, &mut p, -step);
        let down = map(&q, &p)?;
        slot(&mut q, &mut p, 0.0);
        j0.set_column(col, &((up - down) / (2.0 * step)));
    }
    Ok(j0)
}

/// Eigenstructure of `B̂` and the per-mode channel products `|T̂ᵢₚ Γ̂ₚⱼ|`.
#[derive(Debug, Clone)]
pub struct ModeData {
    pub eigvals: Vec<Complex<f64>>,
    pub t: CMatrix,
    pub t_inv: CMatrix,
    pub cond: f64,
    /// Γ̂ for the input, dissipation and linearization families.
    pub gamma: [CMatrix; 3],
}

impl ModeData {
    pub fn new(b: &Matrix, d: &Matrix, j0: &Matrix) -> Self {
        let n = b.nrows();
        let (eigvals, t) = eigen_decomposition(b);
        let svd = t.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        let t_inv = t.clone().try_inverse().unwrap_or_else(|| CMatrix::zeros(n, n));
        let dd = CMatrix::from_diagonal(&d.diagonal().map(|v| Complex::new(v, 0.0)));
        let jc = j0.map(|v| Complex::new(v, 0.0));
        let gamma = [t_inv.clone(), &t_inv * dd, &t_inv * jc];
        Self {
            eigvals,
            t,
            t_inv,
            cond,
            gamma,
        }
    }

    /// `|T̂ᵢₚ Γ̂ₚⱼ|` for `(family, p, i, j)` in a fixed enumeration order.
    pub fn products(&self) -> Vec<(usize, usize, f64)> {
        let n = self.t.nrows();
        let mut out = Vec::new();
        for (f, g) in self.gamma.iter().enumerate() {
            for p in 0..n {
                for i in 0..n {
                    for j in 0..g.ncols() {
                        out.push((f, p, (self.t[(i, p)] * g[(p, j)]).norm()));
                    }
                }
            }
        }
        out
    }
}

/// Eigenvalues sorted by `(Re, Im)` and unit eigenvectors as columns. Clusters
/// of equal eigenvalues receive an orthonormal null-space basis.
pub fn eigen_decomposition(b: &Matrix) -> (Vec<Complex<f64>>, CMatrix) {
    let n = b.nrows();
    let mut eig: Vec<Complex<f64>> = b.complex_eigenvalues().iter().copied().collect();
    eig.sort_by(|a, c| a.re.total_cmp(&c.re).then(a.im.total_cmp(&c.im)));
    let bc = b.map(|v| Complex::new(v, 0.0));
    let mut t = CMatrix::zeros(n, n);
    let tol = 1e-9 * (1.0 + b.amax());
    let mut col = 0;
    while col < n {
        let lam = eig[col];
        let mut m = 1;
        while col + m < n && (eig[col + m] - lam).norm() < tol {
            m += 1;
        }
        let shifted = &bc - CMatrix::identity(n, n) * lam;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.expect("requested");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|a, c| svd.singular_values[*a].total_cmp(&svd.singular_values[*c]));
        for (k, &idx) in order.iter().take(m).enumerate() {
            for r in 0..n {
                t[(r, col + k)] = v_t[(idx, r)].conj();
            }
        }
        col += m;
    }
    (eig, t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BetaReport {
    pub per_mode: Vec<f64>,
    pub beta: f64,
    pub ratios: usize,
    pub ill_conditioned: bool,
}

/// Worst-case multiplicative drift of the mode/channel products between the
/// committed (`nominal`) and the current eigenstructure.
pub fn mode_analysis(nominal: &ModeData, current: &ModeData, cfg: &RhsConfig) -> BetaReport {
    let n = nominal.t.nrows();
    if nominal.cond > cfg.cond_max || current.cond > cfg.cond_max {
        log::warn!(
            "ill-conditioned eigenvector matrix (cond {:.3e} / {:.3e}); using beta cap",
            nominal.cond,
            current.cond
        );
        return BetaReport {
            per_mode: vec![cfg.beta_cap; n],
            beta: cfg.beta_cap,
            ratios: 0,
            ill_conditioned: true,
        };
    }
    let nom = nominal.products();
    let cur = current.products();
    let mut family_max = [0.0f64; 3];
    for &(f, _, v) in &nom {
        family_max[f] = family_max[f].max(v);
    }
    let mut per_mode = vec![1.0f64; n];
    let mut ratios = 0;
    for (&(f, p, v0), &(_, _, v1)) in nom.iter().zip(&cur) {
        if v0 <= cfg.beta_entry_floor * family_max[f] || v0 == 0.0 {
            continue;
        }
        ratios += 1;
        per_mode[p] = per_mode[p].max(v1 / v0);
    }
    for b in per_mode.iter_mut() {
        *b = b.clamp(1.0, cfg.beta_cap);
    }
    let beta = per_mode.iter().copied().fold(1.0, f64::max);
    BetaReport {
        per_mode,
        beta,
        ratios,
        ill_conditioned: false,
    }
}

#[derive(Debug, Clone)]
pub struct GainSynthesis {
    pub b0: Matrix,
    pub d0: Matrix,
    pub j0: Matrix,
    pub modes: ModeData,
    pub beta: f64,
    /// Stability constant from the inequality, before the loop-gain clamp.
    pub c_required: f64,
    /// Constant actually used for the gains.
    pub c: f64,
    pub k: Vector,
    pub td: f64,
    /// Slowest continuous-time port-error rate, `min_p k_p Re(λ_p)`.
    pub sigma_rhs: f64,
    /// Rate of the same loop sampled at the inner-loop interval.
    pub sigma_discrete: f64,
    /// Fastest sliding-mode rate `2λ̄(K_d)/λ̲(M)`.
    pub sigma_n: f64,
    pub t0: f64,
    pub clamped: bool,
    /// `σ_RHS > T_d·σ_n` for the sampled loop.
    pub separated: bool,
}

/// Gains `k_p = c/Re(λ̂_p)` with `c` from the time-scale inequality.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_gains(
    b_hat: &Matrix,
    d_hat: &Matrix,
    j_hat: &Matrix,
    kd: &Matrix,
    lam_min_m: f64,
    beta_hat: f64,
    cfg: &RhsConfig,
    dt: f64,
) -> Result<GainSynthesis> {
    let det = b_hat.determinant();
    if !(det.abs() >= cfg.det_min) {
        return Err(Error::GainFreeze(format!("|det(B0)| = {:.3e}", det.abs())));
    }
    let modes = ModeData::new(b_hat, d_hat, j_hat);
    if let Some(bad) = modes.eigvals.iter().find(|l| !(l.re > cfg.mode_floor)) {
        return Err(Error::GainFreeze(format!("eigenvalue {bad} has Re <= {}", cfg.mode_floor)));
    }
    let beta = beta_hat.clamp(1.0, cfg.beta_cap);
    let kd_max = kd.symmetric_eigenvalues().max();
    let sigma_n = 2.0 * kd_max / lam_min_m;
    let c_required = cfg.safety * 2.0 * cfg.td * cfg.td * (kd_max / lam_min_m) * (1.0 + beta.ln() / 5.0);
    let c_limit = cfg.max_loop_gain / dt;
    let clamped = c_required > c_limit;
    let c = c_required.min(c_limit);

    let n = b_hat.nrows();
    let channel = mode_channels(&modes.t);
    let mut k = Vector::zeros(n);
    for (p, &i) in channel.iter().enumerate() {
        k[i] = c / modes.eigvals[p].re;
    }
    let sigma_rhs = channel
        .iter()
        .enumerate()
        .map(|(p, &i)| k[i] * modes.eigvals[p].re)
        .fold(f64::INFINITY, f64::min);
    let g = sigma_rhs * dt;
    let sigma_discrete = if (1.0..2.0).contains(&g) {
        -(g - 1.0).ln() / dt
    } else {
        -(1.0 - g).abs().ln() / dt
    };
    let t0 = 5.0 / (cfg.td * sigma_n);
    Ok(GainSynthesis {
        b0: b_hat.clone(),
        d0: d_hat.clone(),
        j0: j_hat.clone(),
        modes,
        beta,
        c_required,
        c,
        k,
        td: cfg.td,
        sigma_rhs,
        sigma_discrete,
        sigma_n,
        t0,
        clamped,
        separated: sigma_discrete.min(sigma_rhs) > cfg.td * sigma_n,
    })
}

/// Assigns each mode to the input channel that dominates its eigenvector,
/// strongest modes first, without reusing a channel.
fn mode_channels(t: &CMatrix) -> Vec<usize> {
    let n = t.nrows();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
    for p in 0..n {
        let col_norm = t.column(p).norm().max(f64::MIN_POSITIVE);
        for i in 0..n {
            pairs.push((t[(i, p)].norm() / col_norm, p, i));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut channel = vec![usize::MAX; n];
    let mut used = vec![false; n];
    for (_, p, i) in pairs {
        if channel[p] == usize::MAX && !used[i] {
            channel[p] = i;
            used[i] = true;
        }
    }
    channel
}

/// Outcome of a scheduled gain update.
#[derive(Debug, Clone, PartialEq)]
pub enum GainUpdate {
    Committed { beta: f64, c: f64 },
    Frozen(String),
}

/// Periodic synthesis with double-buffered, slewed gains and the freeze guard.
#[derive(Debug, Clone)]
pub struct GainScheduler {
    cfg: RhsConfig,
    kd: Matrix,
    lam_min_m: f64,
    dt: f64,
    committed: GainSynthesis,
    k_live: Vector,
    freeze_since: Option<f64>,
}

impl GainScheduler {
    /// Starts from a synthesis at the nominal matrices with `β̂ = 1`.
    pub fn new(cfg: &RhsConfig, kd: &Matrix, lam_min_m: f64, dt: f64, b_nom: &Matrix, d_nom: &Matrix) -> Result<Self> {
        cfg.validate()?;
        let n = b_nom.nrows();
        let gs = synthesize_gains(b_nom, d_nom, &Matrix::zeros(n, 2 * n), kd, lam_min_m, 1.0, cfg, dt)?;
        Ok(Self {
            cfg: cfg.clone(),
            kd: kd.clone(),
            lam_min_m,
            dt,
            k_live: gs.k.clone(),
            committed: gs,
            freeze_since: None,
        })
    }

    pub fn gains(&self) -> &Vector {
        &self.k_live
    }

    pub fn committed(&self) -> &GainSynthesis {
        &self.committed
    }

    pub fn frozen(&self) -> bool {
        self.freeze_since.is_some()
    }

    pub fn update(&mut self, t: f64, b_hat: &Matrix, d_hat: &Matrix, j0: &Matrix) -> Result<GainUpdate> {
        let attempt = (|| {
            let det = b_hat.determinant();
            if !(det.abs() >= self.cfg.det_min) {
                return Err(Error::GainFreeze(format!("|det(B0)| = {:.3e}", det.abs())));
            }
            let current = ModeData::new(b_hat, d_hat, j0);
            let beta = mode_analysis(&self.committed.modes, &current, &self.cfg).beta;
            synthesize_gains(b_hat, d_hat, j0, &self.kd, self.lam_min_m, beta, &self.cfg, self.dt)
        })();
        match attempt {
            Ok(gs) => {
                self.freeze_since = None;
                let out = GainUpdate::Committed { beta: gs.beta, c: gs.c };
                self.committed = gs;
                Ok(out)
            }
            Err(Error::GainFreeze(reason)) => {
                let since = *self.freeze_since.get_or_insert(t);
                if t - since > self.cfg.freeze_timeout {
                    return Err(Error::GainFreezeTimeout {
                        t,
                        elapsed: t - since,
                        timeout: self.cfg.freeze_timeout,
                    });
                }
                Ok(GainUpdate::Frozen(reason))
            }
            Err(e) => Err(e),
        }
    }

    /// Moves the live gains one inner step towards the committed ones.
    pub fn slew(&mut self) {
        let a = 1.0 - (-self.dt / self.cfg.gain_slew_tau).exp();
        self.k_live += (&self.committed.k - &self.k_live) * a;
    }
}
