//! Solver cross-checks on real model instances: adaptive and fixed-step
//! agreement, zero-field stationarity, and NFE bookkeeping against an
//! instrumented wrapper.

use nqde_core::cde::{cde_rhs, dopri5_solve, rk4_solve, Constraint, SolverConfig, VariantId};
use nqde_core::path::{fit_natural_cubic, generate_spirals, SplinePath};
use nqde_core::tensor::{Tape, TensorId};
use nqde_core::{CdeError, ModelParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sample_path(seed: u64) -> SplinePath {
    let ds = generate_spirals(2, 30, 0.02, seed).unwrap();
    fit_natural_cubic(&ds.samples[0].0).unwrap()
}

/// Model with every free tensor shrunk, so trajectories stay tame.
fn small_weight_model(variant: VariantId, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelParams::init(variant, &mut rng);
    for p in model.params_mut() {
        if p.constraint != Constraint::OrthoMaintained {
            p.tensor.data_mut().iter_mut().for_each(|v| *v *= 0.5);
        }
    }
    model
}

fn terminal_state(
    model: &ModelParams,
    path: &SplinePath,
    cfg: &mut SolverConfig,
) -> Result<Vec<f64>, CdeError> {
    let mut tape = Tape::new();
    let realized = model.realize(&mut tape)?;
    let x0 = path.eval_at(path.t_start()).0;
    let z0 = realized.init_hidden(&mut tape, &x0)?;
    let mut rhs = |tp: &mut Tape, c: &mut SolverConfig, t: f64, z: TensorId| {
        cde_rhs(tp, c, t, z, path, &realized)
    };
    let sol = match cfg.method {
        nqde_core::Method::Rk4 => rk4_solve(&mut tape, cfg, &mut rhs, z0, path.t_start(), path.t_end())?,
        nqde_core::Method::Dopri5 => {
            dopri5_solve(&mut tape, cfg, &mut rhs, z0, path.t_start(), path.t_end())?
        }
    };
    Ok(tape.value(sol.state).to_vec())
}

#[test]
fn dopri5_agrees_with_fine_rk4_on_model_instances() {
    for (i, variant) in VariantId::ALL.into_iter().enumerate() {
        let model = small_weight_model(variant, 20 + i as u64);
        let path = sample_path(30 + i as u64);

        let mut adaptive_cfg = SolverConfig::dopri5(1e-6, 1e-8);
        let adaptive = terminal_state(&model, &path, &mut adaptive_cfg).unwrap();

        let mut fine_cfg = SolverConfig::rk4(5e-4);
        let reference = terminal_state(&model, &path, &mut fine_cfg).unwrap();

        let max_diff = adaptive
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff <= 1e-5, "{variant}: terminal max-norm gap {max_diff}");
    }
}

#[test]
fn zero_field_is_exact_fixed_point_for_both_solvers() {
    for variant in VariantId::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = ModelParams::init(variant, &mut rng);
        // Zeroing the lift and output layers kills the field; maintained
        // matrices stay on their manifold untouched.
        for name in ["linear1.w", "linear1.b", "out.w", "out.b"] {
            model.param_mut(name).tensor.data_mut().fill(0.0);
        }
        let path = sample_path(9);
        for mut cfg in [SolverConfig::rk4(0.02), SolverConfig::dopri5(1e-4, 1e-6)] {
            let mut tape = Tape::new();
            let realized = model.realize(&mut tape).unwrap();
            let x0 = path.eval_at(path.t_start()).0;
            let z0 = realized.init_hidden(&mut tape, &x0).unwrap();
            let z0_data = tape.value(z0).to_vec();
            let mut rhs = |tp: &mut Tape, c: &mut SolverConfig, t: f64, z: TensorId| {
                cde_rhs(tp, c, t, z, &path, &realized)
            };
            let sol = match cfg.method {
                nqde_core::Method::Rk4 => {
                    rk4_solve(&mut tape, &mut cfg, &mut rhs, z0, path.t_start(), path.t_end())
                        .unwrap()
                }
                nqde_core::Method::Dopri5 => {
                    dopri5_solve(&mut tape, &mut cfg, &mut rhs, z0, path.t_start(), path.t_end())
                        .unwrap()
                }
            };
            // Bit-exact: z + c*0 never rounds.
            assert_eq!(tape.value(sol.state), &z0_data[..], "{variant}");
        }
    }
}

#[test]
fn nfe_counter_matches_instrumented_wrapper() {
    let model = small_weight_model(VariantId::Nqde2Unn, 40);
    let path = sample_path(41);
    let mut cfg = SolverConfig::dopri5(1e-4, 1e-6);

    let mut tape = Tape::new();
    let realized = model.realize(&mut tape).unwrap();
    let x0 = path.eval_at(path.t_start()).0;
    let z0 = realized.init_hidden(&mut tape, &x0).unwrap();
    let mut call_count: u64 = 0;
    let mut rhs = |tp: &mut Tape, c: &mut SolverConfig, t: f64, z: TensorId| {
        call_count += 1;
        cde_rhs(tp, c, t, z, &path, &realized)
    };
    dopri5_solve(&mut tape, &mut cfg, &mut rhs, z0, path.t_start(), path.t_end()).unwrap();
    assert_eq!(cfg.nfe_forward, call_count);
    assert!(cfg.nfe_forward > 0);
}

#[test]
fn constant_spatial_path_drives_through_time_column() {
    // A path whose spatial channels are constant has derivative (1, 0, 0),
    // so the right-hand side equals column 0 of the field matrix.
    let series = nqde_core::path::TimeSeries::new(
        (0..10).map(|i| i as f64 / 9.0).collect(),
        (0..10).flat_map(|i| [i as f64 / 9.0, 0.7, -0.4]).collect(),
        3,
    )
    .unwrap();
    let path = fit_natural_cubic(&series).unwrap();
    let model = small_weight_model(VariantId::Nqde1Unn, 50);

    let mut tape = Tape::new();
    let mut cfg = SolverConfig::default();
    let realized = model.realize(&mut tape).unwrap();
    let z = tape.constant(vec![4], vec![0.2, -0.1, 0.4, 0.3]);
    let field = realized.eval_field(&mut tape, z).unwrap();
    let k = cde_rhs(&mut tape, &mut cfg, 0.37, z, &path, &realized).unwrap();

    let field_data = tape.value(field);
    let col0: Vec<f64> = (0..4).map(|r| field_data[r * 3]).collect();
    for (a, b) in tape.value(k).iter().zip(&col0) {
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
}
