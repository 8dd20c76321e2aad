//! Ground-truth right-hand side: actuation and dissipation with
//! state-dependent uncertainty, plus the external disturbance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    LinearUncertainty,
    NonlinearUncertainty,
    Disturbed,
}

impl Phase {
    pub const ALL: [Phase; 4] = [
        Phase::Warmup,
        Phase::LinearUncertainty,
        Phase::NonlinearUncertainty,
        Phase::Disturbed,
    ];

    /// 0 for warm-up, 1–3 for the scenario phases.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisturbanceSpec {
    /// Constant part (N·m).
    pub offset: Vec<f64>,
    /// Amplitude of the sinusoid applied to every channel (N·m).
    pub amplitude: f64,
    pub frequency_hz: f64,
}

impl Default for DisturbanceSpec {
    fn default() -> Self {
        Self {
            offset: vec![0.2, -0.15],
            amplitude: 0.05,
            frequency_hz: 0.2,
        }
    }
}

/// True matrices at one state. `floored` is set when a dissipation entry was
/// clamped at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueMatrices {
    pub b: Matrix,
    pub d: Matrix,
    pub floored: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthModel {
    pub b_nom: Matrix,
    pub d_nom: Matrix,
    pub disturbance: DisturbanceSpec,
}

impl Default for TruthModel {
    fn default() -> Self {
        Self {
            b_nom: Matrix::identity(2, 2),
            d_nom: Matrix::identity(2, 2) * 0.1,
            disturbance: DisturbanceSpec::default(),
        }
    }
}

impl TruthModel {
    pub fn new(b_nom: Matrix, d_nom: Matrix, disturbance: DisturbanceSpec) -> Result<Self> {
        if b_nom.shape() != (2, 2) || d_nom.shape() != (2, 2) {
            return Err(Error::InvalidParams(
                "the uncertainty model is defined for two joints".into(),
            ));
        }
        if disturbance.offset.len() != 2 {
            return Err(Error::config(
                "plant.disturbance.offset",
                "expected two entries",
            ));
        }
        Ok(Self {
            b_nom,
            d_nom,
            disturbance,
        })
    }

    pub fn dof(&self) -> usize {
        self.b_nom.nrows()
    }

    /// Additive actuation uncertainty. Only the linear term is active in the
    /// linear phase.
    pub fn delta_b(&self, q: &Vector, p: &Vector, phase: Phase) -> Matrix {
        let mut db = Matrix::zeros(2, 2);
        if phase == Phase::Warmup {
            return db;
        }
        // [[a, 0], [b, c]] q, elementwise along columns
        db[(0, 0)] = -0.1 * q[0];
        db[(1, 0)] = 0.05 * q[0];
        db[(1, 1)] = 0.15 * q[1];
        if phase != Phase::LinearUncertainty {
            db[(0, 0)] += 0.15 * p[0] * p[0];
            db[(1, 1)] += -0.25 * p[1] * p[1];
            let q1sq = q[0] * q[0];
            db[(0, 1)] += -0.1 * q1sq;
            db[(1, 0)] += 0.4 * q1sq;
        }
        db
    }

    /// Additive dissipation uncertainty (diagonal).
    pub fn delta_d(&self, p: &Vector, phase: Phase) -> Matrix {
        let mut dd = Matrix::zeros(2, 2);
        if phase == Phase::Warmup {
            return dd;
        }
        dd[(0, 0)] = 0.02 + 0.4 * p[0];
        dd[(1, 1)] = 0.05 + 0.4 * p[1];
        if phase != Phase::LinearUncertainty {
            dd[(0, 0)] += -0.05 * p[0] * p[0];
            dd[(1, 1)] += 0.1 * p[1] * p[1];
        }
        dd
    }

    pub fn true_matrices(&self, q: &Vector, p: &Vector, phase: Phase) -> TrueMatrices {
        let b = &self.b_nom + self.delta_b(q, p, phase);
        let mut d = &self.d_nom + self.delta_d(p, phase);
        let mut floored = false;
        for i in 0..d.nrows() {
            if d[(i, i)] < 0.0 {
                d[(i, i)] = 0.0;
                floored = true;
            }
        }
        TrueMatrices { b, d, floored }
    }

    /// `d(t)`; `t_local` is measured from the start of the current phase.
    pub fn disturbance(&self, t_local: f64, phase: Phase) -> Vector {
        if phase != Phase::Disturbed {
            return Vector::zeros(self.dof());
        }
        let spec = &self.disturbance;
        let wave = spec.amplitude * (2.0 * std::f64::consts::PI * spec.frequency_hz * t_local).sin();
        Vector::from_iterator(self.dof(), spec.offset.iter().map(|o| o + wave))
    }

    /// `τ = B̃u − D̃q̇ + d`.
    pub fn realized_port(
        &self,
        u: &Vector,
        q: &Vector,
        p: &Vector,
        qdot: &Vector,
        t_local: f64,
        phase: Phase,
    ) -> Vector {
        let tm = self.true_matrices(q, p, phase);
        tm.b * u - tm.d * qdot + self.disturbance(t_local, phase)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn close(a: &Matrix, b: &Matrix) -> bool {
        (a - b).amax() < 1e-15
    }

    #[test]
    fn warmup_is_nominal() {
        let m = TruthModel::default();
        let tm = m.true_matrices(&dvector![1.3, -0.4], &dvector![0.7, 0.2], Phase::Warmup);
        assert_eq!(tm.b, Matrix::identity(2, 2));
        assert_eq!(tm.d, Matrix::identity(2, 2) * 0.1);
    }

    #[test]
    fn nonlinear_dissipation_at_unit_momentum() {
        let m = TruthModel::default();
        let dd = m.delta_d(&dvector![1.0, 1.0], Phase::NonlinearUncertainty);
        assert!(close(&dd, &Matrix::from_diagonal(&dvector![0.37, 0.55])));
    }

    #[test]
    fn nonlinear_actuation_at_unit_first_joint() {
        let m = TruthModel::default();
        let db = m.delta_b(&dvector![1.0, 0.0], &dvector![0.0, 0.0], Phase::NonlinearUncertainty);
        let expected = Matrix::from_row_slice(2, 2, &[-0.1, -0.1, 0.45, 0.0]);
        assert!(close(&db, &expected), "{db}");
        // linear phase keeps only the first display term
        let lin = m.delta_b(&dvector![1.0, 0.0], &dvector![0.0, 0.0], Phase::LinearUncertainty);
        assert!(close(&lin, &Matrix::from_row_slice(2, 2, &[-0.1, 0.0, 0.05, 0.0])));
    }

    #[test]
    fn dissipation_is_floored() {
        let m = TruthModel::default();
        let tm = m.true_matrices(&dvector![0.0, 0.0], &dvector![-1.0, 0.0], Phase::LinearUncertainty);
        assert_eq!(tm.d[(0, 0)], 0.0);
        assert!(tm.floored);
    }

    #[test]
    fn disturbance_only_in_last_phase() {
        let m = TruthModel::default();
        for phase in [Phase::Warmup, Phase::LinearUncertainty, Phase::NonlinearUncertainty] {
            assert_eq!(m.disturbance(3.3, phase), Vector::zeros(2));
        }
        let d = m.disturbance(0.0, Phase::Disturbed);
        assert_eq!(d, dvector![0.2, -0.15]);
        let d = m.disturbance(2.5, Phase::Disturbed);
        assert!((d - dvector![0.2, -0.15]).amax() < 1e-15);
    }

    #[test]
    fn disturbance_window_mean_is_offset() {
        let m = TruthModel::default();
        let k = 5000;
        let mean = (0..k)
            .map(|i| m.disturbance((i as f64 + 0.5) * 5.0 / k as f64, Phase::Disturbed))
            .fold(Vector::zeros(2), |a, b| a + b)
            / k as f64;
        assert!((mean - dvector![0.2, -0.15]).amax() < 1e-3);
    }

    #[test]
    fn realized_port_at_rest_is_input_map() {
        let m = TruthModel::default();
        let z = Vector::zeros(2);
        let q = dvector![0.3, 0.1];
        assert_eq!(m.realized_port(&z, &q, &z, &z, 0.0, Phase::NonlinearUncertainty), z);
        let u = dvector![0.4, -0.9];
        assert_eq!(m.realized_port(&u, &q, &z, &z, 0.0, Phase::Warmup), u);
    }
}
