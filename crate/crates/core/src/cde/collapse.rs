//! The collapse readout: squared moduli of the complex amplitudes, a
//! normalization onto the probability simplex, and a sampling or argmax
//! rule for the label.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CollapseError {
    #[error("degenerate state: squared moduli sum to zero, cannot normalize")]
    DegenerateState,
    #[error("state length {0} is not an even number of (re, im) channels")]
    OddStateLength(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum G2Mode {
    /// p / sum(p): the literal norm-1 reading.
    Normalize,
    /// softmax(p): the practical choice, defined even at zero.
    #[default]
    Softmax,
}

impl G2Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normalize" => Some(G2Mode::Normalize),
            "softmax" => Some(G2Mode::Softmax),
            _ => None,
        }
    }
}

/// Squared modulus per complex amplitude from the interleaved (re, im)
/// layout: g1(z)_i = re_i^2 + im_i^2.
pub fn g1(state: &[f64]) -> Result<Vec<f64>, CollapseError> {
    if state.len() % 2 != 0 {
        return Err(CollapseError::OddStateLength(state.len()));
    }
    Ok(state.chunks_exact(2).map(|p| p[0] * p[0] + p[1] * p[1]).collect())
}

/// Maps squared moduli onto the probability simplex.
pub fn g2(moduli: &[f64], mode: G2Mode) -> Result<Vec<f64>, CollapseError> {
    match mode {
        G2Mode::Normalize => {
            let total: f64 = moduli.iter().sum();
            if total <= 0.0 {
                return Err(CollapseError::DegenerateState);
            }
            Ok(moduli.iter().map(|p| p / total).collect())
        }
        G2Mode::Softmax => {
            let max = moduli.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = moduli.iter().map(|p| (p - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            Ok(exps.iter().map(|e| e / total).collect())
        }
    }
}

/// Deterministic readout: index of the largest probability, ties to the
/// lower index.
pub fn g3_argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Stochastic readout: draws a label from the distribution.
pub fn g3_sample(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn g1_examples() {
        assert_eq!(g1(&[1.0, 0.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(g1(&[3.0, 4.0, 0.0, 1.0]).unwrap(), vec![25.0, 1.0]);
        assert!(g1(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn g1_is_phase_invariant() {
        for k in 0..32 {
            let phi = k as f64 * 0.196_349_540_849_362_07;
            let p = g1(&[phi.cos(), phi.sin(), 0.0, 0.0]).unwrap();
            assert!((p[0] - 1.0).abs() <= 1e-12);
            assert_eq!(p[1], 0.0);
        }
    }

    #[test]
    fn g2_symmetric_input() {
        for mode in [G2Mode::Normalize, G2Mode::Softmax] {
            let out = g2(&[1.0, 1.0], mode).unwrap();
            assert_eq!(out, vec![0.5, 0.5]);
        }
    }

    #[test]
    fn g2_normalize_example() {
        assert_eq!(g2(&[3.0, 1.0], G2Mode::Normalize).unwrap(), vec![0.75, 0.25]);
    }

    #[test]
    fn g2_softmax_closed_form() {
        let out = g2(&[1.0, 0.0], G2Mode::Softmax).unwrap();
        let e = std::f64::consts::E;
        assert!((out[0] - e / (e + 1.0)).abs() <= 1e-15);
        assert!((out[1] - 1.0 / (e + 1.0)).abs() <= 1e-15);
    }

    #[test]
    fn g2_normalize_rejects_zero_mass() {
        assert!(matches!(
            g2(&[0.0, 0.0], G2Mode::Normalize),
            Err(CollapseError::DegenerateState)
        ));
        // Softmax stays defined there.
        assert_eq!(g2(&[0.0, 0.0], G2Mode::Softmax).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn g3_certain_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(g3_argmax(&[1.0, 0.0]), 0);
        assert_eq!(g3_sample(&[1.0, 0.0], &mut rng), 0);
    }

    #[test]
    fn g3_argmax_tie_breaks_low() {
        assert_eq!(g3_argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn g3_sample_matches_binomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws = 100_000;
        let p = [0.25, 0.75];
        let ones: u64 = (0..draws).map(|_| g3_sample(&p, &mut rng) as u64).sum();
        let mean = draws as f64 * p[1];
        let sigma = (draws as f64 * p[0] * p[1]).sqrt();
        assert!(
            (ones as f64 - mean).abs() <= 3.0 * sigma,
            "sampled {ones} ones, expected {mean} +- {sigma}"
        );
    }
}
