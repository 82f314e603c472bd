//! The four quantum-inspired CDE vector fields, the CDE-to-ODE reduction,
//! fixed and adaptive solvers with NFE accounting, and the collapse readout.

pub mod collapse;
mod model;
mod solver;

pub use model::{
    cde_rhs, Constraint, ModelParams, Param, RealizedModel, VariantId, FIELD_COLS, HIDDEN_WIDTH,
    INPUT_CHANNELS, STATE_DIM,
};
pub use solver::{dopri5_solve, rk4_solve, solve, Method, Solution, SolverConfig};

use crate::linalg::LinalgError;
use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CdeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("constraint violated on {name}: orthogonality error {error:.3e}")]
    ConstraintViolated { name: String, error: f64 },
    #[error("state diverged (non-finite) at step {step}, t={t}")]
    Divergence { step: u64, t: f64 },
    #[error("step size underflow at t={t} (h={h:.3e}); problem too stiff for the tolerances")]
    StepUnderflow { t: f64, h: f64 },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}
