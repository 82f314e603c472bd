//! Fixed-step RK4 and adaptive Dormand-Prince 5(4) integrators recording
//! every stage on the tape, so gradients follow the exact discrete
//! computation the forward pass performed.

use super::CdeError;
use crate::tensor::{Tape, TensorId};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Rk4,
    Dopri5,
}

impl Method {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rk4" => Some(Method::Rk4),
            "dopri5" => Some(Method::Dopri5),
            _ => None,
        }
    }
}

/// Integration settings plus the NFE counters they feed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    /// Fixed step for RK4.
    pub step_size: f64,
    pub rtol: f64,
    pub atol: f64,
    pub safety: f64,
    pub min_factor: f64,
    pub max_factor: f64,
    /// Vector-field evaluations recorded during forward solves.
    pub nfe_forward: u64,
    /// Vector-field VJPs replayed during reverse sweeps.
    pub nfe_backward: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Dopri5,
            step_size: 0.01,
            rtol: 1e-4,
            atol: 1e-6,
            safety: 0.9,
            min_factor: 0.2,
            max_factor: 10.0,
            nfe_forward: 0,
            nfe_backward: 0,
        }
    }
}

impl SolverConfig {
    pub fn rk4(step_size: f64) -> Self {
        Self { method: Method::Rk4, step_size, ..Self::default() }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self { method: Method::Dopri5, rtol, atol, ..Self::default() }
    }

    fn validate(&self) -> Result<(), CdeError> {
        if self.method == Method::Rk4 && self.step_size <= 0.0 {
            return Err(CdeError::InvalidConfig(format!("step size {} <= 0", self.step_size)));
        }
        if self.rtol <= 0.0 || self.atol <= 0.0 {
            return Err(CdeError::InvalidConfig(format!(
                "tolerances must be positive (rtol {}, atol {})",
                self.rtol, self.atol
            )));
        }
        if !(self.min_factor > 0.0 && self.min_factor < 1.0 && self.max_factor > 1.0) {
            return Err(CdeError::InvalidConfig(format!(
                "need 0 < min_factor < 1 < max_factor, got {} and {}",
                self.min_factor, self.max_factor
            )));
        }
        Ok(())
    }
}

/// Outcome of one solve.
#[derive(Debug, Clone, Copy)]
pub struct Solution {
    pub state: TensorId,
    pub steps_accepted: u64,
    pub steps_rejected: u64,
    /// Extra evaluations spent by the initial step-size heuristic.
    pub init_heuristic_evals: u64,
}

/// The right-hand side contract shared by both solvers: record dz/dt at
/// (t, z) on the tape and return its node.
pub trait Rhs {
    fn eval(
        &mut self,
        tape: &mut Tape,
        cfg: &mut SolverConfig,
        t: f64,
        z: TensorId,
    ) -> Result<TensorId, CdeError>;
}

impl<F> Rhs for F
where
    F: FnMut(&mut Tape, &mut SolverConfig, f64, TensorId) -> Result<TensorId, CdeError>,
{
    fn eval(
        &mut self,
        tape: &mut Tape,
        cfg: &mut SolverConfig,
        t: f64,
        z: TensorId,
    ) -> Result<TensorId, CdeError> {
        self(tape, cfg, t, z)
    }
}

/// Dispatches on `cfg.method`.
pub fn solve(
    tape: &mut Tape,
    cfg: &mut SolverConfig,
    rhs: &mut impl Rhs,
    z0: TensorId,
    t0: f64,
    t1: f64,
) -> Result<Solution, CdeError> {
    match cfg.method {
        Method::Rk4 => rk4_solve(tape, cfg, rhs, z0, t0, t1),
        Method::Dopri5 => dopri5_solve(tape, cfg, rhs, z0, t0, t1),
    }
}

/// Classical fixed-step RK4 from `t0` to `t1`; the step is shortened so the
/// grid lands exactly on `t1`. Four evaluations per step.
pub fn rk4_solve(
    tape: &mut Tape,
    cfg: &mut SolverConfig,
    rhs: &mut impl Rhs,
    z0: TensorId,
    t0: f64,
    t1: f64,
) -> Result<Solution, CdeError> {
    cfg.validate()?;
    let span = t1 - t0;
    if span <= 0.0 {
        return Err(CdeError::InvalidConfig(format!("empty time span [{t0}, {t1}]")));
    }
    let steps = (span / cfg.step_size).ceil().max(1.0) as u64;
    let h = span / steps as f64;
    let mut z = z0;
    for step in 0..steps {
        let t = t0 + step as f64 * h;
        let k1 = rhs.eval(tape, cfg, t, z)?;
        let y2 = tape.add_scaled(z, k1, 0.5 * h)?;
        let k2 = rhs.eval(tape, cfg, t + 0.5 * h, y2)?;
        let y3 = tape.add_scaled(z, k2, 0.5 * h)?;
        let k3 = rhs.eval(tape, cfg, t + 0.5 * h, y3)?;
        let y4 = tape.add_scaled(z, k3, h)?;
        let k4 = rhs.eval(tape, cfg, t + h, y4)?;
        let mut next = tape.add_scaled(z, k1, h / 6.0)?;
        next = tape.add_scaled(next, k2, h / 3.0)?;
        next = tape.add_scaled(next, k3, h / 3.0)?;
        next = tape.add_scaled(next, k4, h / 6.0)?;
        if !tape.value(next).iter().all(|v| v.is_finite()) {
            return Err(CdeError::Divergence { step, t });
        }
        z = next;
    }
    Ok(Solution { state: z, steps_accepted: steps, steps_rejected: 0, init_heuristic_evals: 0 })
}

// Dormand-Prince 5(4) tableau. The last row of A doubles as the 5th-order
// weights (FSAL): the 7th stage is evaluated at the accepted point and
// reused as the first stage of the next step.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// 5th-order minus embedded 4th-order weights, for the error estimate.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
/// PI step-control stabilization exponent.
const PI_BETA: f64 = 0.04;

/// Dormand-Prince 5(4) with FSAL and PI step control. Six fresh evaluations
/// per attempted step; the error is weighted by atol + rtol * max(|z|, |z1|).
pub fn dopri5_solve(
    tape: &mut Tape,
    cfg: &mut SolverConfig,
    rhs: &mut impl Rhs,
    z0: TensorId,
    t0: f64,
    t1: f64,
) -> Result<Solution, CdeError> {
    cfg.validate()?;
    let span = t1 - t0;
    if span <= 0.0 {
        return Err(CdeError::InvalidConfig(format!("empty time span [{t0}, {t1}]")));
    }
    let dim = tape.value(z0).len();
    let h_min = span * 1e-14;

    let mut k = [z0; 7];
    k[0] = rhs.eval(tape, cfg, t0, z0)?;
    let mut init_heuristic_evals = 0;

    // Initial step size: if the derivative signal is negligible any step is
    // fine, so take the whole span; otherwise use the usual two-sample
    // curvature estimate.
    let mut h = {
        let weight = |y: &[f64]| -> Vec<f64> {
            y.iter().map(|v| cfg.atol + cfg.rtol * v.abs()).collect()
        };
        let rms = |v: &[f64], sc: &[f64]| -> f64 {
            (v.iter().zip(sc).map(|(x, s)| (x / s) * (x / s)).sum::<f64>() / dim as f64).sqrt()
        };
        let y = tape.value(z0).to_vec();
        let f0 = tape.value(k[0]).to_vec();
        let sc = weight(&y);
        let d0 = rms(&y, &sc);
        let d1 = rms(&f0, &sc);
        if d1 <= 1e-15 {
            span
        } else {
            let h0 = (0.01 * (d0 / d1)).clamp(1e-6, span);
            let y1 = tape.add_scaled(z0, k[0], h0)?;
            let f1 = rhs.eval(tape, cfg, t0 + h0, y1)?;
            init_heuristic_evals += 1;
            let df: Vec<f64> =
                tape.value(f1).iter().zip(&f0).map(|(a, b)| a - b).collect();
            let d2 = rms(&df, &sc) / h0;
            let dmax = d1.max(d2);
            let h1 = if dmax <= 1e-15 { span } else { (0.01 / dmax).powf(0.2) };
            (100.0 * h0).min(h1).min(span)
        }
    };

    let expo1 = 0.2 - PI_BETA * 0.75;
    let mut facold: f64 = 1e-4;
    let mut z = z0;
    let mut t = t0;
    let mut accepted: u64 = 0;
    let mut rejected: u64 = 0;
    let mut last_rejected = false;

    while t < t1 - span * 1e-12 {
        if h < h_min {
            return Err(CdeError::StepUnderflow { t, h });
        }
        h = h.min(t1 - t);

        // Stages 2..=7; the 7th sits at the candidate end point.
        for stage in 1..7 {
            let mut y = z;
            for (j, &coeff) in A[stage - 1].iter().enumerate().take(stage) {
                if coeff != 0.0 {
                    y = tape.add_scaled(y, k[j], h * coeff)?;
                }
            }
            k[stage] = rhs.eval(tape, cfg, t + C[stage] * h, y)?;
        }
        // The 7th stage's evaluation point is the 5th-order candidate.
        let z_new = {
            let mut y = z;
            for (j, &coeff) in A[5].iter().enumerate() {
                if coeff != 0.0 {
                    y = tape.add_scaled(y, k[j], h * coeff)?;
                }
            }
            y
        };

        // Error estimate and step control stay off the tape: the accept
        // decision is not differentiated through.
        let err = {
            let zv = tape.value(z);
            let nv = tape.value(z_new);
            let mut sum = 0.0;
            for i in 0..dim {
                let mut e = 0.0;
                for (j, &w) in E.iter().enumerate() {
                    if w != 0.0 {
                        e += w * tape.value(k[j])[i];
                    }
                }
                e *= h;
                let sc = cfg.atol + cfg.rtol * zv[i].abs().max(nv[i].abs());
                sum += (e / sc) * (e / sc);
            }
            let err = (sum / dim as f64).sqrt();
            if err.is_finite() {
                err
            } else {
                f64::INFINITY
            }
        };

        let fac11 = if err > 0.0 { err.powf(expo1) } else { 0.0 };
        if err <= 1.0 {
            // Accept. k7 was evaluated at (t + h, z_new): FSAL.
            let fac = (fac11 / facold.powf(PI_BETA) / cfg.safety)
                .clamp(1.0 / cfg.max_factor, 1.0 / cfg.min_factor);
            facold = err.max(1e-4);
            t += h;
            z = z_new;
            k[0] = k[6];
            accepted += 1;
            let mut h_new = h / fac;
            if last_rejected {
                h_new = h_new.min(h);
            }
            last_rejected = false;
            h = h_new;
        } else {
            rejected += 1;
            last_rejected = true;
            h /= (fac11 / cfg.safety).min(1.0 / cfg.min_factor);
        }
    }
    Ok(Solution { state: z, steps_accepted: accepted, steps_rejected: rejected, init_heuristic_evals })
}
