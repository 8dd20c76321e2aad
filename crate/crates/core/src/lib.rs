//! Data-assisted control of a planar free-floating space manipulator in the
//! port-Hamiltonian framework.
//!
//! The momentum equation of the reduced arm dynamics is split into a
//! conservative left-hand side, `ṗ + ∂H/∂q = τ`, and an algebraic right-hand
//! side, `τ = B̃(x)u − D̃(x)q̇ + d(t)`. A sliding-mode controller with
//! null-space collision avoidance requests the port torque `τ`; a fast
//! decentralized integrator drives the actuators until the observed port
//! matches the request; a small two-branch network learns `(B̃, D̃)` online and
//! feeds the gain synthesis.
//!
//! Module map:
//!
//! - [`ph_core`]: structural pH types and the LHS/RHS split.
//! - [`dynamics`]: kinematics, momentum constraint, generalized Jacobian,
//!   reduced mass/Coriolis matrices and the Hamiltonian.
//! - [`lhs_control`]: sliding-mode law, APF null-space term, Lyapunov bounds.
//! - [`truth_plant`]: ground-truth actuation/dissipation and disturbance.
//! - [`rhs_control`]: port observer, integrator loop, gain synthesis.
//! - [`learner`]: the `(B̂, D̂)` estimator with manual backprop and ADAM.
//! - [`sim_engine`]: RK4 plant integration, multi-rate scheduling, logging.
//! - [`metrics`]: run summaries and paired comparisons.
//! - [`verify`]: the invariant/property suite behind `dacph verify`.

// `!(x > y)` rejects NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dynamics;
pub mod error;
pub mod learner;
pub mod lhs_control;
pub mod metrics;
pub mod ph_core;
pub mod rhs_control;
pub mod runlog;
pub mod sim_engine;
pub mod truth_plant;
pub mod verify;

pub use config::ScenarioConfig;
pub use dynamics::{RobotParams, SystemState};
pub use error::{Error, Result};
pub use metrics::RunSummary;
pub use runlog::RunLog;
pub use sim_engine::{run, Mode, RunOutput};

/// Dense column vector used throughout the crate.
pub type Vector = nalgebra::DVector<f64>;
/// Dense matrix used throughout the crate.
pub type Matrix = nalgebra::DMatrix<f64>;
