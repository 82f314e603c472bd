//! Quantum-inspired neural controlled differential equations.
//!
//! A complex-valued latent state, stored as interleaved (re, im) channels,
//! evolves under a trainable vector field driven by a spline-interpolated
//! input path. The field's branch matrices are kept orthogonal, either by
//! projection after each optimizer step or by parametrizing them through
//! the matrix exponential of a skew-symmetric generator. Classification
//! reads the terminal state through a collapse: squared moduli, a
//! normalization onto the simplex, then sampling or argmax.
//!
//! Modules:
//! - [`tensor`]: tape-based reverse-mode autodiff over dense f64 tensors.
//! - [`linalg`]: matrix exponential, polar projection, orthogonality checks.
//! - [`path`]: the bi-directional spiral dataset and natural cubic splines.
//! - [`cde`]: the four field architectures, RK4/Dormand-Prince solvers with
//!   NFE accounting, and the collapse readout.
//! - [`harness`]: loss, Adam with constraint maintenance, experiment runs,
//!   and multi-seed aggregation.

pub mod cde;
pub mod harness;
pub mod linalg;
pub mod path;
pub mod tensor;

pub use cde::{CdeError, Method, ModelParams, SolverConfig, VariantId};
pub use harness::{run_experiment, run_many, RunRecord, RunReport, TrainConfig, Trainer};
pub use tensor::{Tape, Tensor, TensorId};
