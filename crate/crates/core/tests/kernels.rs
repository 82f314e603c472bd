//! The numerical kernels against brute-force oracles: long Taylor sums in
//! double-double arithmetic for the exponential, an eigendecomposition
//! route for the polar factor, finite differences for the exponential's
//! adjoint derivative, and LU determinants for the special-orthogonal check.

use nqde_core::linalg::{
    expm, expm_vjp, orthogonality_error, polar_project, skew, SquareMatrix,
};
use nqde_testkit::{expm_taylor_dd, frobenius_distance, lu_det, polar_by_eig};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> SquareMatrix {
    SquareMatrix::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn expm_matches_long_taylor_on_skew_8x8() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..100 {
        let a = skew(&random_matrix(&mut rng, 8));
        let got = expm(&a);
        let want = expm_taylor_dd(a.as_slice(), 8, 60);
        let dist = frobenius_distance(got.as_slice(), &want);
        assert!(dist <= 1e-10, "Frobenius distance {dist}");
    }
}

#[test]
fn expm_matches_long_taylor_on_general_8x8() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..25 {
        let a = random_matrix(&mut rng, 8);
        let got = expm(&a);
        let want = expm_taylor_dd(a.as_slice(), 8, 60);
        let dist = frobenius_distance(got.as_slice(), &want);
        assert!(dist <= 1e-10, "Frobenius distance {dist}");
    }
}

/// Well-conditioned test matrices with singular values in [0.5, 2]:
/// Q1 * diag * Q2 for random orthogonal factors.
fn well_conditioned(rng: &mut ChaCha8Rng, n: usize) -> SquareMatrix {
    let q1 = expm(&skew(&random_matrix(rng, n)));
    let q2 = expm(&skew(&random_matrix(rng, n)));
    let diag = SquareMatrix::from_fn(n, |i, j| {
        if i == j {
            rng.random_range(0.5..2.0)
        } else {
            0.0
        }
    });
    q1.matmul(&diag).matmul(&q2)
}

#[test]
fn polar_matches_eigendecomposition_route_32x32() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for _ in 0..100 {
        let m = well_conditioned(&mut rng, 32);
        let got = polar_project(&m).unwrap();
        let want = polar_by_eig(m.as_slice(), 32);
        let dist = frobenius_distance(got.as_slice(), &want);
        assert!(dist <= 1e-9, "Frobenius distance {dist}");
    }
}

#[test]
fn expm_vjp_matches_directional_finite_differences() {
    // <vjp(A, G), E> must equal d/de <G, expm(A + e E)> at e = 0.
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let eps = 1e-6;
    for _ in 0..20 {
        let a = random_matrix(&mut rng, 6);
        let g = random_matrix(&mut rng, 6);
        let vjp = expm_vjp(&a, &g).unwrap();
        for _ in 0..5 {
            let direction = random_matrix(&mut rng, 6);
            let analytic: f64 = vjp
                .as_slice()
                .iter()
                .zip(direction.as_slice())
                .map(|(x, y)| x * y)
                .sum();
            let plus = expm(&a.add(&direction.scaled(eps)));
            let minus = expm(&a.add(&direction.scaled(-eps)));
            let numeric: f64 = g
                .as_slice()
                .iter()
                .zip(plus.as_slice().iter().zip(minus.as_slice()))
                .map(|(gv, (p, m))| gv * (p - m) / (2.0 * eps))
                .sum();
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel <= 1e-6, "directional derivative rel err {rel}");
        }
    }
}

#[test]
fn expm_of_skew_has_unit_determinant() {
    // Special orthogonal group membership at brute-force-checkable orders.
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    for n in 2..=8 {
        for _ in 0..20 {
            let w = expm(&skew(&random_matrix(&mut rng, n)));
            let det = lu_det(w.as_slice(), n);
            assert!((det - 1.0).abs() <= 1e-9, "det {det} at n={n}");
        }
    }
}

#[test]
fn expm_skew_orthogonality_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    for _ in 0..100 {
        let w = expm(&skew(&random_matrix(&mut rng, 32)));
        assert!(orthogonality_error(&w) <= 1e-12);
    }
}

#[test]
fn polar_idempotence_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    for _ in 0..25 {
        let m = well_conditioned(&mut rng, 16);
        let once = polar_project(&m).unwrap();
        let twice = polar_project(&once).unwrap();
        assert!(frobenius_distance(once.as_slice(), twice.as_slice()) <= 1e-12);
    }
}
