use std::f64::consts::PI;

use dacph_core::dynamics::{mass_matrix, DynamicsMatrices, RobotParams, SystemState};
use dacph_core::learner::{LearnerConfig, NetworkParams};
use dacph_core::lhs_control::task_pseudoinverse;
use dacph_core::ph_core::{decompose, power_balance, PhStructure};
use dacph_core::sim_engine::rk4_step;
use dacph_core::{dynamics, Matrix, Vector};
use nalgebra::RowDVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn angle() -> impl Strategy<Value = f64> {
    -PI..PI
}

fn vec2(range: f64) -> impl Strategy<Value = Vector> {
    (-range..range, -range..range).prop_map(|(a, b)| Vector::from_vec(vec![a, b]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn mass_matrix_is_symmetric_positive_definite(q1 in angle(), q2 in angle()) {
        let params = RobotParams::shipped();
        let m = mass_matrix(&Vector::from_vec(vec![q1, q2]), 0.0, &params).unwrap();
        prop_assert!((&m - m.transpose()).amax() < 1e-14);
        // grid infimum over the workspace is about 0.00509
        prop_assert!(m.symmetric_eigenvalues().min() > 0.005);
    }

    #[test]
    fn mdot_minus_two_c_is_skew(q1 in angle(), q2 in angle(), qd in vec2(3.0)) {
        let params = RobotParams::shipped();
        let dm = DynamicsMatrices::new(&Vector::from_vec(vec![q1, q2]), &params).unwrap();
        let n = dm.mdot(&qd) - dm.coriolis(&qd) * 2.0;
        prop_assert!((&n + n.transpose()).amax() < 1e-9);
        // and C q̇ carries the velocity-quadratic force: Ṁq̇ − Cq̇ = −∂H/∂q
        let lhs = (dm.mdot(&qd) - dm.coriolis(&qd)) * &qd;
        prop_assert!((lhs + dm.dh_dq_from_qdot(&qd)).amax() < 1e-9);
    }

    #[test]
    fn mechanical_structure_is_passive(d1 in 0.0..5.0f64, d2 in 0.0..5.0f64, b in prop::array::uniform4(-2.0..2.0f64)) {
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![d1, d2]));
        let s = PhStructure::mechanical(&d, &Matrix::from_row_slice(2, 2, &b)).unwrap();
        prop_assert_eq!(s.skew_residual(), 0.0);
        prop_assert!(s.dissipation_min_eig() >= -1e-12);
    }

    #[test]
    fn null_space_projector_identities(d in prop::array::uniform2(-2.0..2.0f64), xi in vec2(5.0)) {
        let row = RowDVector::from_row_slice(&d);
        prop_assume!(row.norm() > 1e-3);
        let (ddag, proj) = task_pseudoinverse(&row, 1e-4).unwrap();
        prop_assert!(((&row * &ddag)[0] - 1.0).abs() < 1e-12);
        prop_assert!((&row * (&proj * &xi)).amax() < 1e-12);
        prop_assert!((&proj * &proj - &proj).amax() < 1e-12);
        prop_assert!((&proj - proj.transpose()).amax() < 1e-12);
    }

    #[test]
    fn learned_dissipation_stays_positive(seed in any::<u64>(), x in prop::array::uniform4(-10.0..10.0f64)) {
        let cfg = LearnerConfig { init_scale: 3.0, ..LearnerConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = NetworkParams::initialized(&cfg, 2, 4, &mut rng);
        let (_, d) = net.predict(&Vector::from_row_slice(&x)).unwrap();
        prop_assert!(d[(0, 1)] == 0.0 && d[(1, 0)] == 0.0);
        prop_assert!(d[(0, 0)] > 0.0 && d[(1, 1)] > 0.0);
    }

    #[test]
    fn momentum_stays_zero_for_any_joint_rate(q1 in angle(), q2 in angle(), th in angle(), qd in vec2(3.0)) {
        let params = RobotParams::shipped();
        let q = Vector::from_vec(vec![q1, q2]);
        let (hl, ha) = dynamics::normalized_momentum(&q, &qd, th, &params).unwrap();
        prop_assert!(hl < 1e-12 && ha < 1e-12);
    }
}

#[test]
fn warm_start_network_returns_initial_matrices() {
    let net = NetworkParams::warm_start(2, 4, &[1.0, 0.2, -0.1, 0.8], &[0.1, 0.3]);
    let (b, d) = net.predict(&Vector::from_vec(vec![0.3, -0.2, 0.5, 1.0])).unwrap();
    assert!((b - Matrix::from_row_slice(2, 2, &[1.0, 0.2, -0.1, 0.8])).amax() < 1e-15);
    assert!((d[(0, 0)] - 0.1).abs() < 1e-12 && (d[(1, 1)] - 0.3).abs() < 1e-12);
}

#[test]
fn energy_changes_by_port_work() {
    let params = RobotParams::shipped();
    let tau = Vector::from_vec(vec![0.03, -0.02]);
    let mut s = SystemState::at_rest(Vector::from_vec(vec![0.5, -0.8]));
    s.p = Vector::from_vec(vec![0.004, -0.002]);
    let dt = 1e-3;
    let qdot = |s: &SystemState| mass_matrix(&s.q, 0.0, &params).unwrap().cholesky().unwrap().solve(&s.p);
    let h0 = dynamics::hamiltonian(&s.q, &s.p, &params).unwrap();
    let mut work = 0.0;
    let mut prev = qdot(&s).dot(&tau);
    for _ in 0..2000 {
        s = rk4_step(&s, &params, dt, |_, _, _, _| tau.clone()).unwrap();
        let now = qdot(&s).dot(&tau);
        work += 0.5 * dt * (prev + now);
        prev = now;
    }
    let h1 = dynamics::hamiltonian(&s.q, &s.p, &params).unwrap();
    assert!(work.abs() > 1e-3, "trajectory too quiet: {work}");
    assert!(((h1 - h0) - work).abs() < 1e-6 * work.abs(), "ΔH {} vs work {work}", h1 - h0);
}

#[test]
fn port_recovered_from_state_derivative() {
    let params = RobotParams::shipped();
    let q = Vector::from_vec(vec![0.2, 1.1]);
    let p = Vector::from_vec(vec![0.01, -0.03]);
    let tau = Vector::from_vec(vec![0.07, 0.02]);
    let dm = DynamicsMatrices::new(&q, &params).unwrap();
    let qdot = dm.cholesky().unwrap().solve(&p);
    let dhdq = dm.dh_dq_from_qdot(&qdot);

    let mut xdot = Vector::zeros(4);
    xdot.rows_mut(0, 2).copy_from(&qdot);
    xdot.rows_mut(2, 2).copy_from(&(&tau - &dhdq));
    let mut grad = Vector::zeros(4);
    grad.rows_mut(0, 2).copy_from(&dhdq);
    grad.rows_mut(2, 2).copy_from(&qdot);

    let s = PhStructure::mechanical(&Matrix::zeros(2, 2), &Matrix::identity(2, 2)).unwrap();
    let port = decompose(&xdot, &grad, &s).unwrap();
    assert!((&port.tau - &tau).amax() < 1e-15);
    assert!((power_balance(&qdot, &port) - qdot.dot(&tau)).abs() < 1e-18);

    // a configuration block that disagrees with ∂H/∂p is not a port
    xdot[0] += 1e-3;
    assert!(decompose(&xdot, &grad, &s).is_err());
}

#[test]
fn rhs_port_matches_actuation_minus_dissipation() {
    let d = Matrix::from_diagonal(&Vector::from_vec(vec![0.1, 0.2]));
    let b = Matrix::from_row_slice(2, 2, &[1.0, 0.1, -0.2, 0.9]);
    let s = PhStructure::mechanical(&d, &b).unwrap();
    let qdot = Vector::from_vec(vec![0.5, -1.0]);
    let mut grad = Vector::zeros(4);
    grad.rows_mut(2, 2).copy_from(&qdot);
    let u = Vector::from_vec(vec![0.3, 0.4]);
    let dist = Vector::from_vec(vec![0.01, -0.02]);
    let rhs = s.rhs_port(&grad, &u, &dist).unwrap();
    let tau = &b * &u - &d * &qdot + &dist;
    assert_eq!(rhs.rows(0, 2).amax(), 0.0);
    assert!((rhs.rows(2, 2) - tau).amax() < 1e-15);
}
