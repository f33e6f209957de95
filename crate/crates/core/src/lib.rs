//! Desk-scale laboratory for ergodic backward SDEs driven by a spectrally
//! truncated stochastic heat equation.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod audit;
pub mod bsde;
pub mod ergodic;
pub mod control;
pub mod coupling;
pub mod error;
pub mod forward;
pub mod linalg;
pub mod mc;
pub mod model;
pub mod oracle;
pub mod quadrature;
pub mod recurrence;
pub mod report;
pub mod rng;
pub mod scenario;
pub mod stats;
pub mod tolerance;

pub use error::{Error, Result};
pub use forward::{girsanov_logweight, moment_audit, simulate_ou, simulate_path, Scheme, Trajectory};
pub use linalg::Mat;
pub use model::{
    build_heat_model, driver_from_control, hamiltonian, ControlSpec, DriftField, DriverSpec, HamiltonianMin,
    ModelSpec, ScalarNonlinearity,
};
pub use stats::MeanSe;
