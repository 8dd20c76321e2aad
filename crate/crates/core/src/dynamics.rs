//! Planar free-floating manipulator: kinematics, momentum constraint,
//! Generalized Jacobian Matrix, reduced dynamics and the Hamiltonian.
//!
//! Geometry convention: body 0 is the base with its COM at `r0` and attitude
//! `θ0`. Joint 1 sits `mount_offset` ahead of the base COM along the base x
//! axis. Links are uniform rods with the COM at mid-length; joint `k+1` sits at
//! the distal end of link `k` and the end-effector at the distal end of link N.
//!
//! Planar spatial velocities are ordered `(ẋ, ẏ, ω)`.

use nalgebra::{Cholesky, Dyn, Matrix3, Matrix3xX, RowDVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use smallvec::{smallvec, SmallVec};

use crate::error::{Error, Result};
use crate::{Matrix, Vector};

/// Step used for the central-difference `∂M/∂q`.
pub const DMDQ_STEP: f64 = 1e-6;

/// Smallest admissible `|det(H_q0)|`.
const HQ0_DET_MIN: f64 = 1e-9;

/// Mass (kg), length (m) and planar moment of inertia about the COM (kg·m²).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Body {
    pub mass: f64,
    pub length: f64,
    pub inertia: f64,
}

impl From<[f64; 3]> for Body {
    fn from([mass, length, inertia]: [f64; 3]) -> Self {
        Self {
            mass,
            length,
            inertia,
        }
    }
}

impl From<Body> for [f64; 3] {
    fn from(b: Body) -> Self {
        [b.mass, b.length, b.inertia]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotParams {
    /// Base first, then links 1..=N.
    pub bodies: Vec<Body>,
    /// Distance from the base COM to the joint-1 axis (m).
    pub mount_offset: f64,
}

impl Default for RobotParams {
    fn default() -> Self {
        Self::shipped()
    }
}

impl RobotParams {
    /// The two-link arm on a 2 kg base used by the shipped scenario.
    pub fn shipped() -> Self {
        Self {
            bodies: vec![
                Body::from([2.0, 0.1225, 0.02]),
                Body::from([1.0, 0.3464, 0.01]),
                Body::from([1.0, 0.3464, 0.01]),
            ],
            mount_offset: 0.1225,
        }
    }

    /// Number of joints.
    pub fn dof(&self) -> usize {
        self.bodies.len().saturating_sub(1)
    }

    pub fn total_mass(&self) -> f64 {
        self.bodies.iter().map(|b| b.mass).sum()
    }

    pub fn total_inertia(&self) -> f64 {
        self.bodies.iter().map(|b| b.inertia).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bodies.len() < 2 {
            return Err(Error::InvalidParams(
                "need a base and at least one link".into(),
            ));
        }
        for (k, b) in self.bodies.iter().enumerate() {
            let ok = |v: f64| v.is_finite() && v > 0.0;
            if !(ok(b.mass) && ok(b.length) && ok(b.inertia)) {
                return Err(Error::InvalidParams(format!(
                    "body {k}: mass, length and inertia must be finite and > 0"
                )));
            }
        }
        if !(self.mount_offset.is_finite() && self.mount_offset >= 0.0) {
            return Err(Error::InvalidParams("mount_offset must be >= 0".into()));
        }
        Ok(())
    }
}

/// Generalized coordinates, momenta and the integrated base pose.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub q: Vector,
    pub p: Vector,
    pub r0: Vector2<f64>,
    pub theta0: f64,
    pub t: f64,
}

impl SystemState {
    pub fn at_rest(q: Vector) -> Self {
        let n = q.len();
        Self {
            q,
            p: Vector::zeros(n),
            r0: Vector2::zeros(),
            theta0: 0.0,
            t: 0.0,
        }
    }

    /// End-effector attitude `α = θ0 + Σ qᵢ`.
    pub fn alpha(&self) -> f64 {
        self.theta0 + self.q.sum()
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.p.iter()).all(|v| v.is_finite())
            && self.r0.iter().all(|v| v.is_finite())
            && self.theta0.is_finite()
    }
}

/// Inertial positions along the chain.
#[derive(Debug, Clone)]
pub struct ChainPoints {
    /// COM of every body, base first.
    pub com: Vec<Vector2<f64>>,
    /// Joint axes 1..=N.
    pub joints: Vec<Vector2<f64>>,
    pub end_effector: Vector2<f64>,
    /// Absolute attitude of every body, base first.
    pub angles: Vec<f64>,
}

fn unit(angle: f64) -> Vector2<f64> {
    Vector2::new(angle.cos(), angle.sin())
}

/// Planar cross product `ẑ × v`.
fn perp(v: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new(-v.y, v.x)
}

/// Scalar planar cross product `a × b`.
fn cross(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

pub fn chain_points(q: &Vector, theta0: f64, r0: &Vector2<f64>, params: &RobotParams) -> ChainPoints {
    let n = params.dof();
    let mut com = Vec::with_capacity(n + 1);
    let mut joints = Vec::with_capacity(n);
    let mut angles = Vec::with_capacity(n + 1);
    com.push(*r0);
    angles.push(theta0);

    let mut joint = r0 + params.mount_offset * unit(theta0);
    let mut angle = theta0;
    for k in 1..=n {
        angle += q[k - 1];
        let dir = unit(angle);
        let len = params.bodies[k].length;
        joints.push(joint);
        com.push(joint + 0.5 * len * dir);
        angles.push(angle);
        joint += len * dir;
    }
    ChainPoints {
        com,
        joints,
        end_effector: joint,
        angles,
    }
}

/// Constraint matrices, per-link Jacobians and the Generalized Jacobian Matrix
/// at one configuration.
#[derive(Debug, Clone)]
pub struct KinematicsBundle {
    /// Momentum constraint, base block: `H_q0 q̇0 + H_q q̇ = 0`.
    pub hq0: Matrix3<f64>,
    pub hq: Matrix3xX<f64>,
    /// `H_k`: base velocity to body-k velocity.
    pub link_h: Vec<Matrix3<f64>>,
    /// `J_k`: joint rates to body-k velocity with the base held fixed.
    pub link_j: Vec<Matrix3xX<f64>>,
    /// `J̄_k = J_k − H_k H_q0⁻¹ H_q`, base (k = 0) included.
    pub gjm_per_link: Vec<Matrix3xX<f64>>,
    /// `q̇0 = base_map · q̇`.
    pub base_map: Matrix3xX<f64>,
    /// `D(q)`: `α̇ = D q̇`.
    pub task_row: RowDVector<f64>,
}

/// Momentum constraint matrices. Rows 1–2 are the linear momentum, row 3 the
/// angular momentum about the instantaneous system COM, so the result does not
/// depend on `r0`.
pub fn constraint_matrices(
    q: &Vector,
    theta0: f64,
    params: &RobotParams,
) -> (Matrix3<f64>, Matrix3xX<f64>) {
    let parts = link_parts(q, theta0, params);
    (parts.hq0, parts.hq)
}

struct LinkParts {
    hq0: Matrix3<f64>,
    hq: Matrix3xX<f64>,
    link_h: Vec<Matrix3<f64>>,
    link_j: Vec<Matrix3xX<f64>>,
}

fn link_parts(q: &Vector, theta0: f64, params: &RobotParams) -> LinkParts {
    let n = params.dof();
    let pts = chain_points(q, theta0, &Vector2::zeros(), params);
    let total_mass = params.total_mass();
    let system_com = pts
        .com
        .iter()
        .zip(&params.bodies)
        .fold(Vector2::zeros(), |acc, (c, b)| acc + b.mass * c)
        / total_mass;

    let mut hq0 = Matrix3::zeros();
    let mut hq = Matrix3xX::zeros(n);
    let mut link_h = Vec::with_capacity(n + 1);
    let mut link_j = Vec::with_capacity(n + 1);

    for (k, body) in params.bodies.iter().enumerate() {
        let c = pts.com[k];
        // base COM sits at the origin here
        let h = Matrix3::new(1.0, 0.0, -c.y, 0.0, 1.0, c.x, 0.0, 0.0, 1.0);
        let mut j = Matrix3xX::zeros(n);
        for i in 0..k {
            let lever = perp(&(c - pts.joints[i]));
            j[(0, i)] = lever.x;
            j[(1, i)] = lever.y;
            j[(2, i)] = 1.0;
        }
        let rho = c - system_com;
        let a = Matrix3::new(
            body.mass,
            0.0,
            0.0,
            0.0,
            body.mass,
            0.0,
            -body.mass * rho.y,
            body.mass * rho.x,
            body.inertia,
        );
        hq0 += a * h;
        hq += a * &j;
        link_h.push(h);
        link_j.push(j);
    }
    LinkParts {
        hq0,
        hq,
        link_h,
        link_j,
    }
}

fn solve_base_map(hq0: &Matrix3<f64>, hq: &Matrix3xX<f64>) -> Result<Matrix3xX<f64>> {
    let lu = hq0.lu();
    let det = lu.determinant();
    if !(det.abs() > HQ0_DET_MIN) {
        return Err(Error::SingularConstraint { det });
    }
    let x = lu
        .solve(hq)
        .ok_or(Error::SingularConstraint { det })?;
    Ok(-x)
}

/// Base COM velocity and angular rate that keep the total momentum at zero:
/// `q̇0 = −H_q0⁻¹ H_q q̇`.
pub fn base_velocity(
    q: &Vector,
    qdot: &Vector,
    theta0: f64,
    params: &RobotParams,
) -> Result<(Vector2<f64>, f64)> {
    let red = Reduced::new(q, theta0, params)?;
    let v = red
        .base_map
        .iter()
        .zip(qdot.iter())
        .fold(Vector3::zeros(), |acc, (col, qd)| acc + col * *qd);
    Ok((Vector2::new(v[0], v[1]), v[2]))
}

pub fn generalized_jacobian(q: &Vector, theta0: f64, params: &RobotParams) -> Result<KinematicsBundle> {
    let parts = link_parts(q, theta0, params);
    let base_map = solve_base_map(&parts.hq0, &parts.hq)?;
    let gjm_per_link: Vec<Matrix3xX<f64>> = parts
        .link_h
        .iter()
        .zip(&parts.link_j)
        .map(|(h, j)| j + h * &base_map)
        .collect();
    let last = gjm_per_link.last().expect("at least one body");
    let task_row = RowDVector::from_iterator(last.ncols(), last.row(2).iter().copied());
    Ok(KinematicsBundle {
        hq0: parts.hq0,
        hq: parts.hq,
        link_h: parts.link_h,
        link_j: parts.link_j,
        gjm_per_link,
        base_map,
        task_row,
    })
}

/// Reduced mass matrix `M(q) = Σ m_k J̄_vkᵀ J̄_vk + I_k J̄_ωkᵀ J̄_ωk`.
///
/// Only relative angles enter, so `θ0` changes the result by rounding only.
pub fn mass_matrix(q: &Vector, theta0: f64, params: &RobotParams) -> Result<Matrix> {
    let red = Reduced::new(q, theta0, params)?;
    let n = params.dof();
    let mut m = Matrix::zeros(n, n);
    let mut gjm: Cols = smallvec![Vector3::zeros(); n];
    for (k, body) in params.bodies.iter().enumerate() {
        let h = red.link_h(k);
        for (a, col) in gjm.iter_mut().enumerate() {
            *col = red.link_j(k, a) + h * red.base_map[a];
        }
        let w = Vector3::new(body.mass, body.mass, body.inertia);
        for a in 0..n {
            for b in a..n {
                m[(a, b)] += w.component_mul(&gjm[a]).dot(&gjm[b]);
            }
        }
    }
    for a in 0..n {
        for b in 0..a {
            m[(a, b)] = m[(b, a)];
        }
    }
    Ok(m)
}

type Points = SmallVec<[Vector2<f64>; 8]>;
type Cols = SmallVec<[Vector3<f64>; 8]>;

/// The algebra of `link_parts` and `solve_base_map` on stack storage, for the
/// paths that run several times per plant step.
struct Reduced {
    com: Points,
    joints: Points,
    /// Columns of `−H_q0⁻¹ H_q`.
    base_map: Cols,
}

impl Reduced {
    fn new(q: &Vector, theta0: f64, params: &RobotParams) -> Result<Self> {
        let n = params.dof();
        let mut com = Points::new();
        let mut joints = Points::new();
        com.push(Vector2::zeros());
        let mut joint = params.mount_offset * unit(theta0);
        let mut angle = theta0;
        for k in 1..=n {
            angle += q[k - 1];
            let dir = unit(angle);
            let len = params.bodies[k].length;
            joints.push(joint);
            com.push(joint + 0.5 * len * dir);
            joint += len * dir;
        }
        let system_com = com
            .iter()
            .zip(&params.bodies)
            .fold(Vector2::zeros(), |acc, (c, b)| acc + b.mass * c)
            / params.total_mass();

        let mut red = Self {
            com,
            joints,
            base_map: smallvec![Vector3::zeros(); n],
        };
        let mut hq0 = Matrix3::zeros();
        for (k, body) in params.bodies.iter().enumerate() {
            let rho = red.com[k] - system_com;
            let a = Matrix3::new(
                body.mass,
                0.0,
                0.0,
                0.0,
                body.mass,
                0.0,
                -body.mass * rho.y,
                body.mass * rho.x,
                body.inertia,
            );
            hq0 += a * red.link_h(k);
            for i in 0..k {
                let v = a * red.link_j(k, i);
                red.base_map[i] += v;
            }
        }
        let lu = hq0.lu();
        let det = lu.determinant();
        if !(det.abs() > HQ0_DET_MIN) {
            return Err(Error::SingularConstraint { det });
        }
        for col in red.base_map.iter_mut() {
            *col = -lu.solve(col).ok_or(Error::SingularConstraint { det })?;
        }
        Ok(red)
    }

    fn link_h(&self, k: usize) -> Matrix3<f64> {
        let c = self.com[k];
        Matrix3::new(1.0, 0.0, -c.y, 0.0, 1.0, c.x, 0.0, 0.0, 1.0)
    }

    /// Column `i` of `J_k`.
    fn link_j(&self, k: usize, i: usize) -> Vector3<f64> {
        if i < k {
            let lever = perp(&(self.com[k] - self.joints[i]));
            Vector3::new(lever.x, lever.y, 1.0)
        } else {
            Vector3::zeros()
        }
    }
}

/// `M(q)` together with its configuration derivatives.
#[derive(Debug, Clone)]
pub struct DynamicsMatrices {
    pub m: Matrix,
    /// `∂M/∂qᵢ` for every joint.
    pub dmdq: Vec<Matrix>,
}

impl DynamicsMatrices {
    pub fn new(q: &Vector, params: &RobotParams) -> Result<Self> {
        let m = mass_matrix(q, 0.0, params)?;
        let n = q.len();
        let mut dmdq = Vec::with_capacity(n);
        let mut qp = q.clone();
        for i in 0..n {
            qp[i] = q[i] + DMDQ_STEP;
            let plus = mass_matrix(&qp, 0.0, params)?;
            qp[i] = q[i] - DMDQ_STEP;
            let minus = mass_matrix(&qp, 0.0, params)?;
            qp[i] = q[i];
            dmdq.push((plus - minus) / (2.0 * DMDQ_STEP));
        }
        Ok(Self { m, dmdq })
    }

    pub fn dof(&self) -> usize {
        self.m.nrows()
    }

    pub fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        self.m
            .clone()
            .cholesky()
            .ok_or(Error::NonFinite("mass matrix (not positive definite)"))
    }

    /// `Ṁ = Σᵢ ∂M/∂qᵢ q̇ᵢ`.
    pub fn mdot(&self, qdot: &Vector) -> Matrix {
        self.dmdq
            .iter()
            .zip(qdot.iter())
            .fold(Matrix::zeros(self.dof(), self.dof()), |acc, (d, v)| acc + d * *v)
    }

    /// Coriolis matrix from the Christoffel symbols
    /// `c_ijk = ½(∂M_ij/∂q_k + ∂M_ik/∂q_j − ∂M_jk/∂q_i)`.
    pub fn coriolis(&self, qdot: &Vector) -> Matrix {
        let n = self.dof();
        let mut c = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += 0.5
                        * (self.dmdq[k][(i, j)] + self.dmdq[j][(i, k)] - self.dmdq[i][(j, k)])
                        * qdot[k];
                }
                c[(i, j)] = acc;
            }
        }
        c
    }

    /// `∂H/∂qᵢ = −½ q̇ᵀ (∂M/∂qᵢ) q̇` with `q̇ = M⁻¹p`.
    pub fn dh_dq_from_qdot(&self, qdot: &Vector) -> Vector {
        Vector::from_iterator(
            self.dof(),
            self.dmdq.iter().map(|d| -0.5 * qdot.dot(&(d * qdot))),
        )
    }
}

pub fn coriolis_matrix(q: &Vector, qdot: &Vector, params: &RobotParams) -> Result<Matrix> {
    Ok(DynamicsMatrices::new(q, params)?.coriolis(qdot))
}

/// `C′(q, p) = C(q, M⁻¹p)`.
pub fn coriolis_prime(q: &Vector, p: &Vector, params: &RobotParams) -> Result<Matrix> {
    let dm = DynamicsMatrices::new(q, params)?;
    let qdot = dm.cholesky()?.solve(p);
    Ok(dm.coriolis(&qdot))
}

/// `H(q, p) = ½ pᵀ M⁻¹(q) p`.
pub fn hamiltonian(q: &Vector, p: &Vector, params: &RobotParams) -> Result<f64> {
    let m = mass_matrix(q, 0.0, params)?;
    let chol = m
        .cholesky()
        .ok_or(Error::NonFinite("mass matrix (not positive definite)"))?;
    Ok(0.5 * p.dot(&chol.solve(p)))
}

pub fn dh_dq(q: &Vector, p: &Vector, params: &RobotParams) -> Result<Vector> {
    let dm = DynamicsMatrices::new(q, params)?;
    let qdot = dm.cholesky()?.solve(p);
    Ok(dm.dh_dq_from_qdot(&qdot))
}

/// The same gradient written as `−(Ṁ − C′) M⁻¹ p`.
pub fn dh_dq_via_coriolis(q: &Vector, p: &Vector, params: &RobotParams) -> Result<Vector> {
    let dm = DynamicsMatrices::new(q, params)?;
    let qdot = dm.cholesky()?.solve(p);
    Ok(-((dm.mdot(&qdot) - dm.coriolis(&qdot)) * qdot))
}

/// Inertial velocity `(ṙ_k, ω_k)` of every body, with the base motion taken
/// from the momentum constraint.
pub fn link_velocities(
    q: &Vector,
    qdot: &Vector,
    theta0: f64,
    params: &RobotParams,
) -> Result<Vec<(Vector2<f64>, f64)>> {
    let kin = generalized_jacobian(q, theta0, params)?;
    Ok(kin
        .gjm_per_link
        .iter()
        .map(|g| {
            let v = g * qdot;
            (Vector2::new(v[0], v[1]), v[2])
        })
        .collect())
}

/// Total linear momentum and angular momentum about the system COM, computed
/// by summing over bodies.
pub fn momentum(
    q: &Vector,
    qdot: &Vector,
    theta0: f64,
    params: &RobotParams,
) -> Result<(Vector2<f64>, f64)> {
    let vel = link_velocities(q, qdot, theta0, params)?;
    let pts = chain_points(q, theta0, &Vector2::zeros(), params);
    let com = pts
        .com
        .iter()
        .zip(&params.bodies)
        .fold(Vector2::zeros(), |acc, (c, b)| acc + b.mass * c)
        / params.total_mass();
    let mut linear = Vector2::zeros();
    let mut angular = 0.0;
    for ((body, c), (v, w)) in params.bodies.iter().zip(&pts.com).zip(&vel) {
        linear += body.mass * v;
        angular += body.inertia * w + body.mass * cross(&(c - com), v);
    }
    Ok((linear, angular))
}

/// `(‖h_L‖ / (Σm · 1 m/s), |h_A| / (ΣI · 1 rad/s))`.
pub fn normalized_momentum(
    q: &Vector,
    qdot: &Vector,
    theta0: f64,
    params: &RobotParams,
) -> Result<(f64, f64)> {
    let (hl, ha) = momentum(q, qdot, theta0, params)?;
    Ok((hl.norm() / params.total_mass(), ha.abs() / params.total_inertia()))
}

/// Infimum and supremum of the eigenvalues of `M(q)` over a uniform grid on
/// `[−π, π]ⁿ` with `points_per_axis` samples per joint (endpoints included).
pub fn inertia_bounds(params: &RobotParams, points_per_axis: usize) -> Result<(f64, f64)> {
    let n = params.dof();
    let k = points_per_axis.max(2);
    let axis: Vec<f64> = (0..k)
        .map(|i| -std::f64::consts::PI + 2.0 * std::f64::consts::PI * i as f64 / (k - 1) as f64)
        .collect();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut idx = vec![0usize; n];
    let total = k.pow(n as u32);
    let mut q = Vector::zeros(n);
    for _ in 0..total {
        for (j, &i) in idx.iter().enumerate() {
            q[j] = axis[i];
        }
        let eig = mass_matrix(&q, 0.0, params)?.symmetric_eigenvalues();
        lo = lo.min(eig.min());
        hi = hi.max(eig.max());
        for slot in idx.iter_mut() {
            *slot += 1;
            if *slot < k {
                break;
            }
            *slot = 0;
        }
    }
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn params() -> RobotParams {
        RobotParams::shipped()
    }

    #[test]
    fn validation_rejects_non_positive_bodies() {
        let mut p = params();
        p.bodies[1].mass = 0.0;
        assert!(p.validate().is_err());
        assert!(params().validate().is_ok());
        let lone = RobotParams {
            bodies: vec![Body::from([1.0, 1.0, 1.0])],
            mount_offset: 0.1,
        };
        assert!(lone.validate().is_err());
    }

    #[test]
    fn degenerate_chain_reduces_to_single_body() {
        let tiny = 1e-12;
        let p = RobotParams {
            bodies: vec![
                Body::from([2.0, 0.1225, 0.02]),
                Body::from([tiny, 0.3, tiny]),
                Body::from([tiny, 0.3, tiny]),
            ],
            mount_offset: 0.1225,
        };
        let (hq0, hq) = constraint_matrices(&dvector![0.4, -1.1], 0.3, &p);
        let expected = Matrix3::new(2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.02);
        assert!((hq0 - expected).amax() < 1e-10);
        assert!(hq.amax() < 1e-10);
    }

    #[test]
    fn zero_joint_rate_means_zero_base_rate() {
        let q = dvector![0.7, -0.2];
        let (v, w) = base_velocity(&q, &Vector::zeros(2), 0.4, &params()).unwrap();
        assert_eq!(v, Vector2::zeros());
        assert_eq!(w, 0.0);
    }

    #[test]
    fn aligned_configuration_has_no_along_axis_base_motion() {
        // arm stretched along the inertial y axis: joint motion is purely
        // perpendicular, so the base cannot move along y
        let q = dvector![0.0, 0.0];
        let (v, _) = base_velocity(&q, &dvector![0.3, -0.3], std::f64::consts::FRAC_PI_2, &params())
            .unwrap();
        assert!(v.y.abs() < 1e-15, "ẏ0 = {}", v.y);
        assert!(v.x.abs() > 1e-3);
    }

    #[test]
    fn base_velocity_zeroes_total_momentum() {
        let q = dvector![std::f64::consts::FRAC_PI_4, -std::f64::consts::FRAC_PI_3];
        let qdot = dvector![0.1, -0.2];
        let (hl, ha) = momentum(&q, &qdot, 0.0, &params()).unwrap();
        assert!(hl.norm() + ha.abs() < 1e-10);
    }

    #[test]
    fn zero_joint_rate_gives_zero_link_velocities() {
        let vel = link_velocities(&dvector![1.0, 2.0], &Vector::zeros(2), 0.1, &params()).unwrap();
        assert!(vel.iter().all(|(v, w)| v.norm() == 0.0 && *w == 0.0));
    }

    #[test]
    fn task_row_is_angular_row_of_last_link() {
        let kin = generalized_jacobian(&dvector![0.5, -0.8], 0.0, &params()).unwrap();
        let last = kin.gjm_per_link.last().unwrap();
        assert_eq!(kin.task_row[0], last[(2, 0)]);
        assert_eq!(kin.task_row[1], last[(2, 1)]);
        // the base counter-rotates, so each entry is below the fixed-base value
        assert!(kin.task_row[0] < 1.0 && kin.task_row[0] > 0.0);
    }

    #[test]
    fn mass_matrix_is_symmetric_and_theta_invariant() {
        let q = dvector![0.3, 1.9];
        let a = mass_matrix(&q, 0.0, &params()).unwrap();
        let b = mass_matrix(&q, 2.1, &params()).unwrap();
        assert_eq!(a, a.transpose());
        assert!((a - b).amax() < 1e-10);
    }

    #[test]
    fn hamiltonian_vanishes_at_rest() {
        let q = dvector![0.2, 0.4];
        let p = Vector::zeros(2);
        assert_eq!(hamiltonian(&q, &p, &params()).unwrap(), 0.0);
        assert_eq!(dh_dq(&q, &p, &params()).unwrap().amax(), 0.0);
    }

    #[test]
    fn gradient_forms_agree() {
        let q = dvector![0.9, -1.4];
        let p = dvector![0.01, -0.02];
        let a = dh_dq(&q, &p, &params()).unwrap();
        let b = dh_dq_via_coriolis(&q, &p, &params()).unwrap();
        assert!((a - &b).amax() < 1e-12 * (1.0 + b.amax()));
    }

    #[test]
    fn coriolis_vanishes_at_zero_rate() {
        let c = coriolis_matrix(&dvector![0.2, -0.7], &Vector::zeros(2), &params()).unwrap();
        assert_eq!(c.amax(), 0.0);
    }

    #[test]
    fn inertia_bounds_bracket_sample() {
        let (lo, hi) = inertia_bounds(&params(), 25).unwrap();
        let eig = mass_matrix(&dvector![0.5, -0.8], 0.0, &params())
            .unwrap()
            .symmetric_eigenvalues();
        assert!(lo > 0.0 && lo <= eig.min() && eig.max() <= hi);
    }
}
