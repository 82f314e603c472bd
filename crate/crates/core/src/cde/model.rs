//! The four vector-field architectures and their parameter sets.
//!
//! The hidden state is a length-4 vector holding two complex amplitudes in
//! interleaved layout (re1, im1, re2, im2). Weight matrices carry one of
//! three constraint tags: free, orthogonality maintained by projection after
//! each optimizer step, or realized as expm(A - A^T) of a free generator.

use super::{CdeError, SolverConfig};
use crate::linalg::{self, SquareMatrix};
use crate::path::SplinePath;
use crate::tensor::{Tape, Tensor, TensorId};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Hidden-state width: two complex amplitudes as (re, im) pairs.
pub const STATE_DIM: usize = 4;
/// Input path channels (time, x, y).
pub const INPUT_CHANNELS: usize = 3;
/// Width of the shared lift layer (the lin_size hyperparameter).
pub const HIDDEN_WIDTH: usize = 32;
/// The field matrix maps path increments to state increments.
pub const FIELD_COLS: usize = INPUT_CHANNELS;

/// Orthogonality tolerance enforced on maintained matrices at realization.
pub const CONSTRAINT_TOL: f64 = 1e-6;

/// The four model variants. The `unn` pair keeps branch matrices orthogonal
/// by post-step projection; the `geo` pair parametrizes them through the
/// exponential map. Odd variants concatenate branch outputs before the final
/// linear layer, even variants after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariantId {
    Nqde1Unn,
    Nqde2Unn,
    Nqde3Geo,
    Nqde4Geo,
}

impl VariantId {
    pub const ALL: [VariantId; 4] =
        [VariantId::Nqde1Unn, VariantId::Nqde2Unn, VariantId::Nqde3Geo, VariantId::Nqde4Geo];

    pub fn name(self) -> &'static str {
        match self {
            VariantId::Nqde1Unn => "nqde1_unn",
            VariantId::Nqde2Unn => "nqde2_unn",
            VariantId::Nqde3Geo => "nqde3_geo",
            VariantId::Nqde4Geo => "nqde4_geo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s.to_ascii_lowercase())
    }

    pub fn is_geo(self) -> bool {
        matches!(self, VariantId::Nqde3Geo | VariantId::Nqde4Geo)
    }

    /// Branch outputs are concatenated before the final linear layer.
    fn concat_before_linear(self) -> bool {
        matches!(self, VariantId::Nqde1Unn | VariantId::Nqde3Geo)
    }

    /// Default learning rate for this variant.
    pub fn default_lr(self) -> f64 {
        if self.is_geo() {
            0.001
        } else {
            0.002
        }
    }
}

impl std::fmt::Display for VariantId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Constraint tag attached to each weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Constraint {
    Free,
    /// Kept orthogonal by polar projection after every optimizer step.
    OrthoMaintained,
    /// Trainable generator A; the effective weight is expm(A - A^T).
    SkewExp,
}

/// One named parameter tensor with its constraint tag and init fan-in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub constraint: Constraint,
    fan_in: usize,
}

/// The trainable state of one model variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    variant: VariantId,
    params: Vec<Param>,
}

/// (name, rows, cols, constraint, fan_in); cols == 0 marks a bias vector.
type ParamLayout = (&'static str, usize, usize, Constraint, usize);

fn param_layout(variant: VariantId) -> Vec<ParamLayout> {
    use Constraint::*;
    let w = HIDDEN_WIDTH;
    let mut layout = vec![
        ("initial.w", STATE_DIM, INPUT_CHANNELS, Free, INPUT_CHANNELS),
        ("initial.b", STATE_DIM, 0, Free, INPUT_CHANNELS),
        ("linear1.w", w, STATE_DIM, Free, STATE_DIM),
        ("linear1.b", w, 0, Free, STATE_DIM),
    ];
    if variant.is_geo() {
        layout.extend([
            ("stiefel1.gen", w, w, SkewExp, w),
            ("stiefel1.b", w, 0, Free, w),
            ("stiefel2.gen", w, w, SkewExp, w),
            ("stiefel2.b", w, 0, Free, w),
        ]);
    } else {
        layout.extend([
            ("rnn1.recurrent", w, w, OrthoMaintained, w),
            ("rnn1.input", w, w, Free, w),
            ("rnn2.recurrent", w, w, OrthoMaintained, w),
            ("rnn2.input", w, w, Free, w),
        ]);
    }
    let field_len = STATE_DIM * FIELD_COLS;
    if variant.concat_before_linear() {
        layout.push(("out.w", field_len, 2 * w, Free, 2 * w));
        layout.push(("out.b", field_len, 0, Free, 2 * w));
    } else {
        layout.push(("out.w", field_len / 2, w, Free, w));
        layout.push(("out.b", field_len / 2, 0, Free, w));
    }
    layout
}

impl ModelParams {
    /// Initializes a model: free tensors uniform in ±1/sqrt(fan_in),
    /// maintained matrices as random orthogonal (polar factor of a Gaussian
    /// draw), exponential-map generators as small Gaussians so those layers
    /// start near the identity.
    pub fn init(variant: VariantId, rng: &mut impl Rng) -> Self {
        let params = param_layout(variant)
            .into_iter()
            .map(|(name, rows, cols, constraint, fan_in)| {
                let len = rows * cols.max(1);
                let data: Vec<f64> = match constraint {
                    Constraint::Free => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        (0..len).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                    Constraint::OrthoMaintained => {
                        let gauss: Vec<f64> =
                            (0..len).map(|_| StandardNormal.sample(rng)).collect();
                        let m = SquareMatrix::from_slice(rows, &gauss).expect("square");
                        linalg::polar_project(&m)
                            .expect("random Gaussian matrices are well conditioned")
                            .as_slice()
                            .to_vec()
                    }
                    Constraint::SkewExp => (0..len)
                        .map(|_| {
                            let g: f64 = StandardNormal.sample(rng);
                            0.01 * g
                        })
                        .collect(),
                };
                let shape = if cols == 0 { vec![rows] } else { vec![rows, cols] };
                Param {
                    name: name.to_string(),
                    tensor: Tensor::new(shape, data, true),
                    constraint,
                    fan_in,
                }
            })
            .collect();
        Self { variant, params }
    }

    pub fn variant(&self) -> VariantId {
        self.variant
    }

    /// Total number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> &Param {
        self.params.iter().find(|p| p.name == name).expect("unknown parameter name")
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Param {
        self.params.iter_mut().find(|p| p.name == name).expect("unknown parameter name")
    }

    /// Worst orthogonality error over every constrained matrix, with the
    /// exponential-map weights measured after realization.
    pub fn max_constraint_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for p in &self.params {
            let err = match p.constraint {
                Constraint::Free => continue,
                Constraint::OrthoMaintained => {
                    let m = SquareMatrix::from_slice(p.tensor.shape()[0], p.tensor.data())
                        .expect("square");
                    linalg::orthogonality_error(&m)
                }
                Constraint::SkewExp => {
                    let a = SquareMatrix::from_slice(p.tensor.shape()[0], p.tensor.data())
                        .expect("square");
                    let w = linalg::expm(&linalg::skew(&a));
                    linalg::orthogonality_error(&w)
                }
            };
            worst = worst.max(err);
        }
        worst
    }

    /// Registers every parameter on `tape` and materializes the effective
    /// branch weights (one expm per exponential-map generator, shared by all
    /// field evaluations recorded afterwards). Fails if a maintained matrix
    /// has drifted off the manifold.
    pub fn realize(&self, tape: &mut Tape) -> Result<RealizedModel, CdeError> {
        for p in &self.params {
            if p.constraint == Constraint::OrthoMaintained {
                let m = SquareMatrix::from_slice(p.tensor.shape()[0], p.tensor.data())
                    .expect("square");
                let err = linalg::orthogonality_error(&m);
                if err > CONSTRAINT_TOL {
                    return Err(CdeError::ConstraintViolated { name: p.name.clone(), error: err });
                }
            }
        }
        let leaf_ids: Vec<TensorId> = self.params.iter().map(|p| tape.leaf(&p.tensor)).collect();
        let id = |name: &str| {
            let idx = self.params.iter().position(|p| p.name == name).expect("param");
            leaf_ids[idx]
        };
        let branches = if self.variant.is_geo() {
            [
                BranchWeights::Geo {
                    weight: tape.expm_skew(id("stiefel1.gen"))?,
                    bias: id("stiefel1.b"),
                },
                BranchWeights::Geo {
                    weight: tape.expm_skew(id("stiefel2.gen"))?,
                    bias: id("stiefel2.b"),
                },
            ]
        } else {
            [
                BranchWeights::Unn { recurrent: id("rnn1.recurrent"), input: id("rnn1.input") },
                BranchWeights::Unn { recurrent: id("rnn2.recurrent"), input: id("rnn2.input") },
            ]
        };
        Ok(RealizedModel {
            variant: self.variant,
            initial_w: id("initial.w"),
            initial_b: id("initial.b"),
            lift_w: id("linear1.w"),
            lift_b: id("linear1.b"),
            branches,
            out_w: id("out.w"),
            out_b: id("out.b"),
            leaf_ids,
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum BranchWeights {
    Unn { recurrent: TensorId, input: TensorId },
    Geo { weight: TensorId, bias: TensorId },
}

/// Tape handles for one realization of a model's parameters.
#[derive(Debug, Clone)]
pub struct RealizedModel {
    variant: VariantId,
    initial_w: TensorId,
    initial_b: TensorId,
    lift_w: TensorId,
    lift_b: TensorId,
    branches: [BranchWeights; 2],
    out_w: TensorId,
    out_b: TensorId,
    leaf_ids: Vec<TensorId>,
}

impl RealizedModel {
    pub fn variant(&self) -> VariantId {
        self.variant
    }

    /// Leaf ids in the same order as [`ModelParams::params`].
    pub fn leaf_ids(&self) -> &[TensorId] {
        &self.leaf_ids
    }

    /// z_0 from the first path observation through the initial linear map.
    pub fn init_hidden(&self, tape: &mut Tape, x0: &[f64]) -> Result<TensorId, CdeError> {
        let x = tape.constant(vec![INPUT_CHANNELS], x0.to_vec());
        Ok(tape.affine(x, self.initial_w, self.initial_b)?)
    }

    /// The field matrix f(z) of shape [STATE_DIM, FIELD_COLS].
    pub fn eval_field(&self, tape: &mut Tape, z: TensorId) -> Result<TensorId, CdeError> {
        let lifted = tape.affine(z, self.lift_w, self.lift_b)?;
        let hidden = tape.relu(lifted);
        let mut branch_outputs = [None, None];
        for (slot, branch) in branch_outputs.iter_mut().zip(self.branches) {
            let pre = match branch {
                BranchWeights::Unn { recurrent, input } => {
                    let rh = tape.matvec(recurrent, hidden)?;
                    let kh = tape.matvec(input, hidden)?;
                    tape.add(rh, kh)?
                }
                BranchWeights::Geo { weight, bias } => tape.affine(hidden, weight, bias)?,
            };
            *slot = Some(tape.relu(pre));
        }
        let (b1, b2) = (branch_outputs[0].unwrap(), branch_outputs[1].unwrap());
        let flat = if self.variant.concat_before_linear() {
            let cat = tape.concat(&[b1, b2], 0)?;
            tape.affine(cat, self.out_w, self.out_b)?
        } else {
            let o1 = tape.affine(b1, self.out_w, self.out_b)?;
            let o2 = tape.affine(b2, self.out_w, self.out_b)?;
            tape.concat(&[o1, o2], 0)?
        };
        Ok(tape.reshape(flat, vec![STATE_DIM, FIELD_COLS])?)
    }
}

/// dz/dt = f(z) · X'(t): one vector-field evaluation, counted in
/// `cfg.nfe_forward` and flagged for the backward-NFE accounting.
pub fn cde_rhs(
    tape: &mut Tape,
    cfg: &mut SolverConfig,
    t: f64,
    z: TensorId,
    path: &SplinePath,
    model: &RealizedModel,
) -> Result<TensorId, CdeError> {
    let field = model.eval_field(tape, z)?;
    let (xdot, _) = path.derivative_at(t);
    let xd = tape.constant(vec![FIELD_COLS], xdot);
    let k = tape.matvec(field, xd)?;
    tape.mark_rhs_eval(k);
    cfg.nfe_forward += 1;
    Ok(k)
}
