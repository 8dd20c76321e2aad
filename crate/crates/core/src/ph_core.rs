//! Port-Hamiltonian structure and the LHS/RHS split.
//!
//! A pH system `ẋ = (J − R)∇H + g·u` is rearranged into
//! `ẋ − J∇H = Π = −R∇H + g·u`. For mechanical systems the port `Π` only has a
//! momentum block, so past this module it is carried as the n-vector `τ`.

use crate::error::{Error, Result};
use crate::{Matrix, Vector};

/// Interconnection, dissipation and input maps of a pH system with `n`
/// generalized coordinates and `m` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PhStructure {
    n: usize,
    j: Matrix,
    r: Matrix,
    g: Matrix,
}

impl PhStructure {
    /// Canonical mechanical structure: `J = [[0, I], [−I, 0]]`,
    /// `R = blkdiag(0, D)`, `g = [[0, 0], [B, I]]` acting on the stacked input
    /// `[u; d]`.
    pub fn mechanical(dissipation: &Matrix, input: &Matrix) -> Result<Self> {
        let n = dissipation.nrows();
        check_dim("dissipation columns", n, dissipation.ncols())?;
        check_dim("input map rows", n, input.nrows())?;
        let m = input.ncols();

        let mut j = Matrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            j[(i, n + i)] = 1.0;
            j[(n + i, i)] = -1.0;
        }
        let mut r = Matrix::zeros(2 * n, 2 * n);
        r.view_mut((n, n), (n, n)).copy_from(dissipation);
        let mut g = Matrix::zeros(2 * n, m + n);
        g.view_mut((n, 0), (n, m)).copy_from(input);
        for i in 0..n {
            g[(n + i, m + i)] = 1.0;
        }
        Ok(Self { n, j, r, g })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn interconnection(&self) -> &Matrix {
        &self.j
    }

    pub fn dissipation(&self) -> &Matrix {
        &self.r
    }

    pub fn input_map(&self) -> &Matrix {
        &self.g
    }

    /// `‖J + Jᵀ‖_max`; zero for every structure built by this type.
    pub fn skew_residual(&self) -> f64 {
        (&self.j + self.j.transpose()).amax()
    }

    /// Smallest eigenvalue of the symmetric part of `R`.
    pub fn dissipation_min_eig(&self) -> f64 {
        let sym = (&self.r + self.r.transpose()) * 0.5;
        sym.symmetric_eigenvalues().min()
    }

    /// Right-hand side of the split, `−R∇H + g·[u; d]`.
    pub fn rhs_port(&self, grad_h: &Vector, u: &Vector, d: &Vector) -> Result<Vector> {
        check_dim("hamiltonian gradient", 2 * self.n, grad_h.len())?;
        check_dim("disturbance", self.n, d.len())?;
        check_dim("input", self.g.ncols() - self.n, u.len())?;
        let mut stacked = Vector::zeros(u.len() + d.len());
        stacked.rows_mut(0, u.len()).copy_from(u);
        stacked.rows_mut(u.len(), d.len()).copy_from(d);
        Ok(-(&self.r * grad_h) + &self.g * stacked)
    }
}

/// Net non-conservative generalized force at the virtual port.
///
/// Only the momentum block `τ` is stored; the configuration block of `Π` is
/// zero by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PortVariables {
    pub tau: Vector,
    /// Actuator input that produced `tau`, when known.
    pub u: Option<Vector>,
    /// Disturbance contribution, when known.
    pub d: Option<Vector>,
}

impl PortVariables {
    pub fn from_tau(tau: Vector) -> Self {
        Self {
            tau,
            u: None,
            d: None,
        }
    }

    /// The full 2n-vector `Π = [0; τ]`.
    pub fn pi(&self) -> Vector {
        let n = self.tau.len();
        let mut pi = Vector::zeros(2 * n);
        pi.rows_mut(n, n).copy_from(&self.tau);
        pi
    }
}

/// Relative tolerance on the configuration block of `ẋ − J∇H`.
const CONFIG_BLOCK_TOL: f64 = 1e-9;

/// Extracts the port from a state derivative: `Π = ẋ − J∇H`.
///
/// The configuration block must vanish (`q̇ = ∂H/∂p`); its momentum block is
/// `ṗ + ∂H/∂q`.
pub fn decompose(
    state_derivative: &Vector,
    hamiltonian_gradient: &Vector,
    structure: &PhStructure,
) -> Result<PortVariables> {
    let n = structure.n();
    check_dim("state derivative", 2 * n, state_derivative.len())?;
    check_dim("hamiltonian gradient", 2 * n, hamiltonian_gradient.len())?;

    let pi = state_derivative - structure.interconnection() * hamiltonian_gradient;
    let scale = 1.0 + state_derivative.rows(0, n).amax();
    let residual = pi.rows(0, n).amax();
    if residual > CONFIG_BLOCK_TOL * scale {
        return Err(Error::ConfigurationBlock { residual });
    }
    Ok(PortVariables::from_tau(pi.rows(n, n).into_owned()))
}

/// Power delivered through the port into the conservative part, `q̇ᵀτ` (W).
pub fn power_balance(qdot: &Vector, port: &PortVariables) -> f64 {
    qdot.dot(&port.tau)
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn structure() -> PhStructure {
        PhStructure::mechanical(&(Matrix::identity(2, 2) * 0.1), &Matrix::identity(2, 2)).unwrap()
    }

    #[test]
    fn canonical_interconnection_is_skew() {
        let s = structure();
        assert_eq!(s.skew_residual(), 0.0);
        assert_eq!(s.interconnection()[(0, 2)], 1.0);
        assert_eq!(s.interconnection()[(2, 0)], -1.0);
        assert!(s.dissipation_min_eig() >= -1e-12);
    }

    #[test]
    fn conservative_flow_has_zero_port() {
        let s = structure();
        let grad = dvector![0.3, -0.2, 0.7, 1.1];
        let xdot = s.interconnection() * &grad;
        let port = decompose(&xdot, &grad, &s).unwrap();
        assert_eq!(port.tau, dvector![0.0, 0.0]);
    }

    #[test]
    fn gradient_free_case_returns_momentum_rate() {
        let s = structure();
        let grad = Vector::zeros(4);
        let xdot = dvector![0.0, 0.0, 0.4, -0.25];
        let port = decompose(&xdot, &grad, &s).unwrap();
        assert_eq!(port.tau, dvector![0.4, -0.25]);
        assert_eq!(port.pi(), dvector![0.0, 0.0, 0.4, -0.25]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let s = structure();
        let err = decompose(&Vector::zeros(3), &Vector::zeros(4), &s).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn configuration_block_must_vanish() {
        let s = structure();
        let grad = Vector::zeros(4);
        let xdot = dvector![0.1, 0.0, 0.0, 0.0];
        assert!(matches!(
            decompose(&xdot, &grad, &s),
            Err(Error::ConfigurationBlock { .. })
        ));
    }

    #[test]
    fn rhs_port_has_zero_configuration_block() {
        let b = Matrix::from_row_slice(2, 2, &[1.0, 0.2, -0.1, 0.9]);
        let d = Matrix::from_diagonal(&dvector![0.1, 0.3]);
        let s = PhStructure::mechanical(&d, &b).unwrap();
        let grad = dvector![0.5, -0.5, 0.2, 0.4];
        let pi = s.rhs_port(&grad, &dvector![1.0, 2.0], &dvector![0.05, 0.0]).unwrap();
        assert_eq!(pi[0], 0.0);
        assert_eq!(pi[1], 0.0);
        // τ = B u − D q̇ + d with q̇ = ∂H/∂p
        assert!((pi[2] - (1.0 + 0.4 - 0.02 + 0.05)).abs() < 1e-15);
        assert!((pi[3] - (-0.1 + 1.8 - 0.12)).abs() < 1e-15);
    }

    #[test]
    fn power_balance_is_velocity_dot_force() {
        let zero = PortVariables::from_tau(Vector::zeros(2));
        assert_eq!(power_balance(&dvector![1.0, 2.0], &zero), 0.0);
        let port = PortVariables::from_tau(dvector![1.0, 2.0]);
        assert_eq!(power_balance(&Vector::zeros(2), &port), 0.0);
        assert_eq!(power_balance(&dvector![0.5, -1.0], &port), -1.5);
    }
}
