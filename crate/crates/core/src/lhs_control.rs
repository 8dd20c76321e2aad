//! Outer loop: sliding-mode orientation tracking of the end-effector attitude
//! with potential-field collision avoidance in the task null space.

use nalgebra::{RowDVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::dynamics::{chain_points, DynamicsMatrices, KinematicsBundle, RobotParams};
use crate::error::{Error, Result};
use crate::{Matrix, Vector};

/// Step of the central differences behind the potential gradient.
const APF_FD_STEP: f64 = 1e-6;
/// Smallest distance used inside the repulsive potential.
const RHO_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustTerm {
    /// `χ·tanh(s/ε)` componentwise.
    Tanh,
    /// Discontinuous `χ·s/‖s‖`.
    Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LhsConfig {
    /// `K_d`, row-major n×n.
    pub kd: Vec<f64>,
    pub lambda: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub robust_term: RobustTerm,
    pub singularity_threshold: f64,
    /// Time constant of the low-pass on the differentiated `ν` (s).
    pub nu_dot_tau: f64,
    /// Null-space excitation per joint, `[amplitude (rad/s), frequency (Hz)]`,
    /// added to `ξ`. Empty disables it.
    pub dither: Vec<[f64; 2]>,
}

impl Default for LhsConfig {
    fn default() -> Self {
        Self {
            kd: vec![0.5, 0.0, 0.0, 0.5],
            lambda: 1.0,
            eta: 0.1,
            epsilon: 0.2,
            robust_term: RobustTerm::Tanh,
            singularity_threshold: 1e-4,
            nu_dot_tau: 0.02,
            dither: vec![[0.2, 3.1], [0.2, 4.3]],
        }
    }
}

impl LhsConfig {
    pub fn kd_matrix(&self, n: usize) -> Matrix {
        Matrix::from_row_slice(n, n, &self.kd)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.kd.len() != n * n {
            return Err(Error::config("lhs.kd", format!("need {} entries", n * n)));
        }
        let kd = self.kd_matrix(n);
        if (&kd - kd.transpose()).amax() > 1e-12 || kd.clone().cholesky().is_none() {
            return Err(Error::config("lhs.kd", "must be symmetric positive definite"));
        }
        for (key, v) in [
            ("lhs.lambda", self.lambda),
            ("lhs.epsilon", self.epsilon),
            ("lhs.singularity_threshold", self.singularity_threshold),
            ("lhs.nu_dot_tau", self.nu_dot_tau),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be > 0"));
            }
        }
        if !(self.eta >= 0.0) {
            return Err(Error::config("lhs.eta", "must be >= 0"));
        }
        if !self.dither.is_empty()
            && (self.dither.len() != n || self.dither.iter().flatten().any(|v| !v.is_finite()))
        {
            return Err(Error::config("lhs.dither", format!("need {n} finite [amplitude, frequency] pairs")));
        }
        Ok(())
    }
}

/// Desired end-effector attitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Reference {
    /// `α_d = offset + amplitude·sin(2πt/period)` plus optional
    /// `[amplitude, period]` harmonics.
    Sine {
        amplitude: f64,
        period: f64,
        #[serde(default)]
        offset: f64,
        #[serde(default)]
        harmonics: Vec<[f64; 2]>,
    },
    /// `α̇_d = Λ(α − α_d)` from `α_d(0) = α(0)`: the task command is zero and
    /// `ν` reduces to the null-space term.
    Follow,
}

impl Default for Reference {
    fn default() -> Self {
        Reference::Sine {
            amplitude: 0.5,
            period: 240.0,
            offset: 0.0,
            harmonics: vec![[0.05, 2.0]],
        }
    }
}

impl Reference {
    pub fn validate(&self) -> Result<()> {
        if let Reference::Sine {
            amplitude,
            period,
            offset,
            harmonics,
        } = self
        {
            let bad = |a: f64, p: f64| !(p > 0.0 && p.is_finite()) || !a.is_finite();
            if bad(*amplitude, *period) || !offset.is_finite() || harmonics.iter().any(|[a, p]| bad(*a, *p)) {
                return Err(Error::config("reference", "sine needs a finite amplitude and period > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApfConfig {
    pub obstacle_radius: f64,
    pub influence_dist: f64,
    /// `[min, max]` per joint (rad).
    pub joint_limits: Vec<[f64; 2]>,
    pub limit_margin: f64,
    pub weight_obstacle: f64,
    pub weight_limits: f64,
}

impl Default for ApfConfig {
    fn default() -> Self {
        Self {
            obstacle_radius: 0.18,
            influence_dist: 0.30,
            joint_limits: vec![[-2.6, 2.6]; 2],
            limit_margin: 0.2,
            weight_obstacle: 0.02,
            weight_limits: 0.5,
        }
    }
}

impl ApfConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.obstacle_radius > 0.0 && self.influence_dist > self.obstacle_radius) {
            return Err(Error::config(
                "apf.influence_dist",
                "need influence_dist > obstacle_radius > 0",
            ));
        }
        if self.joint_limits.len() != n || self.joint_limits.iter().any(|[lo, hi]| !(lo < hi)) {
            return Err(Error::config(
                "apf.joint_limits",
                format!("need {n} non-empty [min, max] intervals"),
            ));
        }
        if !(self.limit_margin >= 0.0 && self.weight_obstacle >= 0.0 && self.weight_limits >= 0.0) {
            return Err(Error::config("apf", "margin and weights must be >= 0"));
        }
        Ok(())
    }
}

/// `D† = Dᵀ/(DDᵀ)` and the null-space projector `I − D†D`.
pub fn task_pseudoinverse(task_row: &RowDVector<f64>, threshold: f64) -> Result<(Vector, Matrix)> {
    let norm = task_row.norm();
    if !(norm > threshold) {
        return Err(Error::DynamicSingularity { norm, threshold });
    }
    let n = task_row.len();
    let ddag = task_row.transpose() / (norm * norm);
    let proj = Matrix::identity(n, n) - &ddag * task_row;
    Ok((ddag, proj))
}

/// Points checked against the base disc, expressed relative to the base COM:
/// link midpoints, joints 2..=N and the end-effector. Joint 1 is rigidly
/// mounted on the base and is not a free point.
pub fn monitored_points(q: &Vector, params: &RobotParams) -> Vec<Vector2<f64>> {
    let pts = chain_points(q, 0.0, &Vector2::zeros(), params);
    pts.com[1..]
        .iter()
        .chain(pts.joints[1..].iter())
        .chain(std::iter::once(&pts.end_effector))
        .copied()
        .collect()
}

/// Smallest distance from a monitored point to the edge of the base disc.
pub fn min_clearance(q: &Vector, params: &RobotParams, cfg: &ApfConfig) -> f64 {
    monitored_points(q, params)
        .iter()
        .map(|p| p.norm() - cfg.obstacle_radius)
        .fold(f64::INFINITY, f64::min)
}

/// `U(q) = U_obs + U_lim`. Distances are measured in the base frame, so the
/// base pose drops out.
pub fn apf_potential(q: &Vector, params: &RobotParams, cfg: &ApfConfig) -> f64 {
    let inv_rho0 = 1.0 / (cfg.influence_dist - cfg.obstacle_radius);
    let mut u_obs = 0.0;
    for p in monitored_points(q, params) {
        let rho = (p.norm() - cfg.obstacle_radius).max(RHO_MIN);
        if rho < cfg.influence_dist - cfg.obstacle_radius {
            let g = 1.0 / rho - inv_rho0;
            u_obs += 0.5 * cfg.weight_obstacle * g * g;
        }
    }
    let mut u_lim = 0.0;
    for (qi, [lo, hi]) in q.iter().zip(&cfg.joint_limits) {
        let below = (lo + cfg.limit_margin - qi).max(0.0);
        let above = (qi - hi + cfg.limit_margin).max(0.0);
        u_lim += cfg.weight_limits * (below * below + above * above);
    }
    u_obs + u_lim
}

/// Central-difference gradient of [`apf_potential`].
pub fn apf_gradient(q: &Vector, params: &RobotParams, cfg: &ApfConfig) -> Vector {
    let mut qp = q.clone();
    Vector::from_iterator(
        q.len(),
        (0..q.len()).map(|i| {
            qp[i] = q[i] + APF_FD_STEP;
            let up = apf_potential(&qp, params, cfg);
            qp[i] = q[i] - APF_FD_STEP;
            let down = apf_potential(&qp, params, cfg);
            qp[i] = q[i];
            (up - down) / (2.0 * APF_FD_STEP)
        }),
    )
}

/// Analytic exponential bounds on `V(t) = ½sᵀMs` for the ideal closed loop.
pub fn lyapunov_envelope(v0: f64, t: f64, lam_m: (f64, f64), lam_kd: (f64, f64)) -> (f64, f64) {
    let (m_lo, m_hi) = lam_m;
    let (k_lo, k_hi) = lam_kd;
    let lower = v0 * (-2.0 * k_hi * t / m_lo).exp();
    let upper = v0 * (-2.0 * k_lo * t / m_hi).exp();
    (lower, upper)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlidingState {
    pub alpha: f64,
    pub alpha_d: f64,
    pub alpha_d_dot: f64,
    pub alpha_err: f64,
    pub nu: Vector,
    pub nu_dot: Vector,
    pub s: Vector,
    pub v: f64,
}

#[derive(Debug, Clone)]
pub struct LhsOutput {
    pub sliding: SlidingState,
    pub tau_req: Vector,
    pub xi: Vector,
    /// Largest violation among the projector identities at this step.
    pub proj_residual: f64,
    pub singular: bool,
}

/// Sliding-mode controller with its derivative filter and reference state.
#[derive(Debug, Clone)]
pub struct LhsController {
    cfg: LhsConfig,
    apf: ApfConfig,
    reference: Reference,
    kd: Matrix,
    prev_nu: Option<Vector>,
    nu_dot: Vector,
    follow_alpha_d: Option<f64>,
}

impl LhsController {
    pub fn new(cfg: &LhsConfig, apf: &ApfConfig, reference: &Reference, n: usize) -> Result<Self> {
        cfg.validate(n)?;
        apf.validate(n)?;
        reference.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            apf: apf.clone(),
            reference: reference.clone(),
            kd: cfg.kd_matrix(n),
            prev_nu: None,
            nu_dot: Vector::zeros(n),
            follow_alpha_d: None,
        })
    }

    pub fn kd(&self) -> &Matrix {
        &self.kd
    }

    /// `(α_d, α̇_d)` at time `t` for the current attitude `alpha`.
    fn desired(&mut self, t: f64, alpha: f64) -> (f64, f64) {
        match &self.reference {
            Reference::Sine {
                amplitude,
                period,
                offset,
                harmonics,
            } => std::iter::once([*amplitude, *period]).chain(harmonics.iter().copied()).fold(
                (*offset, 0.0),
                |(a, ad), [amp, period]| {
                    let w = 2.0 * std::f64::consts::PI / period;
                    (a + amp * (w * t).sin(), ad + amp * w * (w * t).cos())
                },
            ),
            Reference::Follow => {
                let ad = *self.follow_alpha_d.get_or_insert(alpha);
                (ad, self.cfg.lambda * (alpha - ad))
            }
        }
    }

    /// One outer-loop update at interval `dt` (s).
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        t: f64,
        q: &Vector,
        qdot: &Vector,
        alpha: f64,
        kin: &KinematicsBundle,
        dm: &DynamicsMatrices,
        params: &RobotParams,
        chi: f64,
        dt: f64,
    ) -> Result<LhsOutput> {
        let n = q.len();
        let (alpha_d, alpha_d_dot) = self.desired(t, alpha);
        let alpha_err = alpha - alpha_d;

        let mut xi = if self.cfg.eta > 0.0 {
            -self.cfg.eta * apf_gradient(q, params, &self.apf)
        } else {
            Vector::zeros(n)
        };
        for (i, [amp, hz]) in self.cfg.dither.iter().enumerate() {
            xi[i] += amp * (2.0 * std::f64::consts::PI * hz * t).sin();
        }

        let (nu, singular, proj_residual) =
            match task_pseudoinverse(&kin.task_row, self.cfg.singularity_threshold) {
                Ok((ddag, proj)) => {
                    let nu = &ddag * (alpha_d_dot - self.cfg.lambda * alpha_err) + &proj * &xi;
                    let residual = [
                        ((&kin.task_row * &ddag)[0] - 1.0).abs(),
                        (&kin.task_row * &proj).amax(),
                        (&proj * &proj - &proj).amax(),
                    ]
                    .into_iter()
                    .fold(0.0, f64::max);
                    (nu, false, residual)
                }
                Err(Error::DynamicSingularity { .. }) => (
                    self.prev_nu.clone().unwrap_or_else(|| Vector::zeros(n)),
                    true,
                    0.0,
                ),
                Err(e) => return Err(e),
            };

        if singular {
            self.nu_dot.fill(0.0);
        } else if let Some(prev) = &self.prev_nu {
            let raw = (&nu - prev) / dt;
            let a = 1.0 - (-dt / self.cfg.nu_dot_tau).exp();
            self.nu_dot += (raw - &self.nu_dot) * a;
        }
        self.prev_nu = Some(nu.clone());
        if let (Reference::Follow, Some(ad)) = (&self.reference, self.follow_alpha_d.as_mut()) {
            *ad += alpha_d_dot * dt;
        }

        let s = qdot - &nu;
        let v = 0.5 * s.dot(&(&dm.m * &s));
        let robust = match self.cfg.robust_term {
            RobustTerm::Tanh => s.map(|si| chi * (si / self.cfg.epsilon).tanh()),
            RobustTerm::Unit => {
                let norm = s.norm();
                if norm > 0.0 {
                    &s * (chi / norm)
                } else {
                    Vector::zeros(n)
                }
            }
        };
        let c = dm.coriolis(qdot);
        let tau_req = &dm.m * &self.nu_dot + c * &nu - &self.kd * &s - robust;
        if tau_req.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("requested port torque"));
        }

        Ok(LhsOutput {
            sliding: SlidingState {
                alpha,
                alpha_d,
                alpha_d_dot,
                alpha_err,
                nu,
                nu_dot: self.nu_dot.clone(),
                s,
                v,
            },
            tau_req,
            xi,
            proj_residual,
            singular,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::generalized_jacobian;
    use nalgebra::dvector;

    #[test]
    fn pseudoinverse_of_unit_row() {
        let (ddag, proj) = task_pseudoinverse(&RowDVector::from_row_slice(&[1.0, 0.0]), 1e-4).unwrap();
        assert_eq!(ddag, dvector![1.0, 0.0]);
        assert_eq!(proj, Matrix::from_diagonal(&dvector![0.0, 1.0]));
    }

    #[test]
    fn pseudoinverse_identities() {
        let d = RowDVector::from_row_slice(&[0.37, -1.21]);
        let (ddag, proj) = task_pseudoinverse(&d, 1e-4).unwrap();
        assert!(((&d * &ddag)[0] - 1.0).abs() < 1e-12);
        assert!((&d * &proj).amax() < 1e-12);
        assert!((&proj * &proj - &proj).amax() < 1e-12);
    }

    #[test]
    fn near_singular_row_is_rejected() {
        let d = RowDVector::from_row_slice(&[1e-5, 0.0]);
        assert!(matches!(
            task_pseudoinverse(&d, 1e-4),
            Err(Error::DynamicSingularity { .. })
        ));
    }

    #[test]
    fn extended_arm_in_mid_range_feels_no_potential() {
        let params = RobotParams::shipped();
        let g = apf_gradient(&dvector![0.0, 0.0], &params, &ApfConfig::default());
        assert_eq!(g, Vector::zeros(2));
    }

    #[test]
    fn limit_wall_is_continuous_at_margin() {
        let params = RobotParams::shipped();
        let cfg = ApfConfig {
            weight_obstacle: 0.0,
            ..Default::default()
        };
        assert_eq!(apf_potential(&dvector![2.4, 0.0], &params, &cfg), 0.0);
        assert!(apf_potential(&dvector![2.41, 0.0], &params, &cfg) > 0.0);
    }

    #[test]
    fn folded_elbow_is_pushed_outward() {
        let params = RobotParams::shipped();
        let cfg = ApfConfig::default();
        let mut q = dvector![0.3, 2.3];
        let start = min_clearance(&q, &params, &cfg);
        assert!(start < cfg.influence_dist - cfg.obstacle_radius);
        let dt = 1e-3;
        for _ in 0..1000 {
            q -= apf_gradient(&q, &params, &cfg) * (0.1 * dt);
        }
        assert!(min_clearance(&q, &params, &cfg) > start);
    }

    #[test]
    fn envelope_limits() {
        assert_eq!(lyapunov_envelope(2.0, 0.0, (0.1, 0.3), (0.5, 0.5)), (2.0, 2.0));
        let (lo, hi) = lyapunov_envelope(1.0, 0.7, (0.2, 0.2), (0.5, 0.5));
        assert_eq!(lo, hi);
        assert!((lo - (-2.0 * 0.5 * 0.7 / 0.2f64).exp()).abs() < 1e-15);
        let (lo, hi) = lyapunov_envelope(1.0, 3.0, (0.005, 0.044), (0.5, 0.5));
        assert!(lo <= hi);
    }

    #[test]
    fn rest_on_reference_requests_nothing() {
        let params = RobotParams::shipped();
        let q = dvector![0.5, -0.8];
        let z = Vector::zeros(2);
        let kin = generalized_jacobian(&q, 0.0, &params).unwrap();
        let dm = DynamicsMatrices::new(&q, &params).unwrap();
        let cfg = LhsConfig {
            eta: 0.0,
            ..Default::default()
        };
        let mut ctl =
            LhsController::new(&cfg, &ApfConfig::default(), &Reference::Follow, 2).unwrap();
        let out = ctl.step(0.0, &q, &z, -0.3, &kin, &dm, &params, 0.0, 0.01).unwrap();
        assert_eq!(out.sliding.nu, z);
        assert_eq!(out.tau_req, z);
    }

    #[test]
    fn robust_term_is_bounded_by_chi() {
        let params = RobotParams::shipped();
        let q = dvector![0.5, -0.8];
        let kin = generalized_jacobian(&q, 0.0, &params).unwrap();
        let dm = DynamicsMatrices::new(&q, &params).unwrap();
        let cfg = LhsConfig {
            kd: vec![1e-12, 0.0, 0.0, 1e-12],
            eta: 0.0,
            ..Default::default()
        };
        let mut ctl =
            LhsController::new(&cfg, &ApfConfig::default(), &Reference::Follow, 2).unwrap();
        let qdot = dvector![30.0, -20.0];
        let chi = 0.3;
        let with = ctl.step(0.0, &q, &qdot, 0.0, &kin, &dm, &params, chi, 0.01).unwrap();
        let mut ctl =
            LhsController::new(&cfg, &ApfConfig::default(), &Reference::Follow, 2).unwrap();
        let without = ctl.step(0.0, &q, &qdot, 0.0, &kin, &dm, &params, 0.0, 0.01).unwrap();
        let robust = with.tau_req - without.tau_req;
        assert!(robust.amax() <= chi);
        assert!(robust.amax() > 0.99 * chi);
    }
}
