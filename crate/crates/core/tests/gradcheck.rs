//! Finite-difference oracles for every differentiable operation and for the
//! full model end to end. Central differences with step 1e-6; relative
//! error floored per the helper in the testkit.

use nqde_core::cde::{SolverConfig, VariantId};
use nqde_core::harness::batch_loss;
use nqde_core::path::{fit_natural_cubic, generate_spirals, SplinePath};
use nqde_core::tensor::{Tape, TensorId};
use nqde_core::ModelParams;
use nqde_testkit::max_rel_err;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-6;

/// Gradcheck harness for tape ops: `build` wires leaves into a scalar loss.
fn gradcheck_op(
    inputs: &[(Vec<usize>, Vec<f64>)],
    build: impl Fn(&mut Tape, &[TensorId]) -> TensorId,
    tol: f64,
    floor: f64,
) {
    // Reverse-mode gradients.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|(shape, data)| tape.leaf_from_parts(shape.clone(), data.clone(), true))
        .collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> =
        ids.iter().map(|&id| tape.grad(id).unwrap().to_vec()).collect();

    // Central differences, one scalar at a time.
    let eval = |perturbed: &[(Vec<usize>, Vec<f64>)]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = perturbed
            .iter()
            .map(|(shape, data)| tape.leaf_from_parts(shape.clone(), data.clone(), true))
            .collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss)[0]
    };
    for (which, (_, data)) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; data.len()];
        for i in 0..data.len() {
            let mut plus = inputs.to_vec();
            plus[which].1[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[which].1[i] -= FD_STEP;
            numeric[i] = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        let err = max_rel_err(&analytic[which], &numeric, floor);
        assert!(err <= tol, "input {which}: rel err {err} > {tol}");
    }
}

fn random_data(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn matmul_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![
        (vec![3, 4], random_data(&mut rng, 12)),
        (vec![4, 2], random_data(&mut rng, 8)),
    ];
    gradcheck_op(
        &inputs,
        |tape, ids| {
            let prod = tape.matmul(ids[0], ids[1]).unwrap();
            tape.sum_all(prod)
        },
        1e-5,
        1e-6,
    );
}

#[test]
fn matvec_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![
        (vec![5, 3], random_data(&mut rng, 15)),
        (vec![3], random_data(&mut rng, 3)),
    ];
    gradcheck_op(
        &inputs,
        |tape, ids| {
            let out = tape.matvec(ids[0], ids[1]).unwrap();
            let sq = tape.mul(out, out).unwrap();
            tape.sum_all(sq)
        },
        1e-5,
        1e-6,
    );
}

#[test]
fn affine_gradient_four_to_six() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![
        (vec![4], random_data(&mut rng, 4)),
        (vec![6, 4], random_data(&mut rng, 24)),
        (vec![6], random_data(&mut rng, 6)),
    ];
    gradcheck_op(
        &inputs,
        |tape, ids| {
            let out = tape.affine(ids[0], ids[1], ids[2]).unwrap();
            let sq = tape.mul(out, out).unwrap();
            tape.sum_all(sq)
        },
        1e-5,
        1e-6,
    );
}

#[test]
fn affine_gradient_batched() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![
        (vec![3, 4], random_data(&mut rng, 12)),
        (vec![2, 4], random_data(&mut rng, 8)),
        (vec![2], random_data(&mut rng, 2)),
    ];
    gradcheck_op(
        &inputs,
        |tape, ids| {
            let out = tape.affine(ids[0], ids[1], ids[2]).unwrap();
            let sq = tape.mul(out, out).unwrap();
            tape.sum_all(sq)
        },
        1e-5,
        1e-6,
    );
}

#[test]
fn relu_gradient_away_from_kinks() {
    // Inputs sit at least 1e-4 from zero so the central difference never
    // straddles the kink.
    let inputs = vec![(vec![6], vec![-0.9, -0.4, -0.01, 0.01, 0.5, 1.0])];
    gradcheck_op(
        &inputs,
        |tape, ids| {
            let r = tape.relu(ids[0]);
            let sq = tape.mul(r, r).unwrap();
            tape.sum_all(sq)
        },
        1e-5,
        1e-6,
    );
}

#[test]
fn concat_and_stack_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![
        (vec![3], random_data(&mut rng, 3)),
        (vec![2], random_data(&mut rng, 2)),
        (vec![5], random_data(&mut rng, 5)),
    ];
    gradcheck_op(
        &inputs,
        |tape, ids| {
            let cat = tape.concat(&[ids[0], ids[1]], 0).unwrap();
            let stacked = tape.stack_rows(&[cat, ids[2]]).unwrap();
            let sq = tape.mul(stacked, stacked).unwrap();
            tape.sum_all(sq)
        },
        1e-5,
        1e-6,
    );
}

#[test]
fn log_softmax_nll_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = vec![(vec![3, 2], random_data(&mut rng, 6))];
    gradcheck_op(
        &inputs,
        |tape, ids| tape.log_softmax_nll(ids[0], &[0, 1, 0]).unwrap(),
        1e-5,
        1e-6,
    );
}

#[test]
fn pair_square_sum_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![(vec![4], random_data(&mut rng, 4))];
    gradcheck_op(
        &inputs,
        |tape, ids| {
            let p = tape.pair_square_sum(ids[0]).unwrap();
            let logits = tape.stack_rows(&[p]).unwrap();
            tape.log_softmax_nll(logits, &[1]).unwrap()
        },
        1e-5,
        1e-6,
    );
}

#[test]
fn expm_skew_gradient() {
    // Checks the tape wiring around the block-matrix adjoint: the pullback
    // of expm(A - A^T) onto A. The readout must not be rotation-invariant
    // (|Wx|^2 would be constant over the orthogonal group), so project the
    // weight onto a fixed random matrix before squaring.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let probe = random_data(&mut rng, 16);
    let inputs = vec![(vec![4, 4], random_data(&mut rng, 16))];
    gradcheck_op(
        &inputs,
        |tape, ids| {
            let w = tape.expm_skew(ids[0]).unwrap();
            let c = tape.constant(vec![4, 4], probe.clone());
            let projected = tape.mul(w, c).unwrap();
            let s = tape.sum_all(projected);
            let sq = tape.mul(s, s).unwrap();
            tape.sum_all(sq)
        },
        1e-5,
        1e-6,
    );
}

/// Loss of a model over a fixed toy batch, for finite differences.
fn toy_loss(model: &ModelParams, samples: &[(SplinePath, usize)], solver: &SolverConfig) -> f64 {
    let mut tape = Tape::new();
    let mut cfg = solver.clone();
    let indices: Vec<usize> = (0..samples.len()).collect();
    let (loss, _) = batch_loss(&mut tape, model, samples, &indices, &mut cfg).unwrap();
    tape.value(loss)[0]
}

/// Every-parameter gradcheck of one variant on a 2-sample, 5-step batch
/// under fixed-step RK4.
pub fn full_model_gradcheck(variant: VariantId, tol: f64) {
    let dataset = generate_spirals(2, 5, 0.02, 11).unwrap();
    let samples: Vec<(SplinePath, usize)> = dataset
        .samples
        .iter()
        .map(|(series, label)| (fit_natural_cubic(series).unwrap(), *label))
        .collect();
    let solver = SolverConfig::rk4(0.05);

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = ModelParams::init(variant, &mut rng);

    let mut tape = Tape::new();
    let mut cfg = solver.clone();
    let (loss, leaf_ids) =
        batch_loss(&mut tape, &model, &samples, &[0, 1], &mut cfg).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> =
        leaf_ids.iter().map(|&id| tape.grad(id).unwrap().to_vec()).collect();

    for (pi, param) in model.params().iter().enumerate() {
        let mut numeric = vec![0.0; param.tensor.len()];
        for i in 0..param.tensor.len() {
            let mut plus = model.clone();
            plus.params_mut()[pi].tensor.data_mut()[i] += FD_STEP;
            let mut minus = model.clone();
            minus.params_mut()[pi].tensor.data_mut()[i] -= FD_STEP;
            numeric[i] =
                (toy_loss(&plus, &samples, &solver) - toy_loss(&minus, &samples, &solver))
                    / (2.0 * FD_STEP);
        }
        let err = max_rel_err(&analytic[pi], &numeric, 1e-4);
        assert!(err <= tol, "{variant} {}: rel err {err} > {tol}", param.name);
    }
}

#[test]
fn full_nqde1_every_parameter() {
    full_model_gradcheck(VariantId::Nqde1Unn, 1e-4);
}
