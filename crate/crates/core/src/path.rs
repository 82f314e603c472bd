//! Control paths: the bi-directional spiral dataset and natural cubic
//! spline interpolation so the driving path and its derivative are
//! evaluable at arbitrary times.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Channels per observation: time, x, y.
pub const CHANNELS: usize = 3;

const SPIRAL_TURNS_ANGLE: f64 = 4.0 * std::f64::consts::PI;
const SPIRAL_RADIUS_MIN: f64 = 0.2;
const SPIRAL_RADIUS_MAX: f64 = 1.0;

#[derive(Debug, Error)]
pub enum PathError {
    #[error("need at least 2 timesteps, got {0}")]
    TooFewTimesteps(usize),
    #[error("sample count must be an even number >= 2, got {0}")]
    BadSampleCount(usize),
    #[error("noise level must be non-negative, got {0}")]
    NegativeSigma(f64),
    #[error("timestamps must be strictly increasing (violated at index {0})")]
    NonIncreasingTimestamps(usize),
    #[error("series has {values} values for {expected} (timesteps x channels)")]
    LengthMismatch { values: usize, expected: usize },
}

/// A regularly observed multichannel series. Values are row-major
/// [timesteps x channels]; channel 0 carries the timestamp itself
/// (time augmentation).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    timestamps: Vec<f64>,
    values: Vec<f64>,
    channels: usize,
}

impl TimeSeries {
    pub fn new(timestamps: Vec<f64>, values: Vec<f64>, channels: usize) -> Result<Self, PathError> {
        if timestamps.len() < 2 {
            return Err(PathError::TooFewTimesteps(timestamps.len()));
        }
        if let Some(i) = (1..timestamps.len()).find(|&i| timestamps[i] <= timestamps[i - 1]) {
            return Err(PathError::NonIncreasingTimestamps(i));
        }
        let expected = timestamps.len() * channels;
        if values.len() != expected {
            return Err(PathError::LengthMismatch { values: values.len(), expected });
        }
        Ok(Self { timestamps, values, channels })
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Observation at timestep `i` (all channels).
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }
}

/// Two-class dataset of spirals traced clockwise or counterclockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct SpiralDataset {
    pub samples: Vec<(TimeSeries, usize)>,
    pub seed: u64,
}

/// Generates `n` spirals over `timesteps` observations. The first half are
/// counterclockwise (label 0), the second half clockwise (label 1); both
/// classes run radius 0.2 to 1.0 over two full turns, with iid Gaussian
/// noise of standard deviation `sigma` on the spatial channels.
pub fn generate_spirals(
    n: usize,
    timesteps: usize,
    sigma: f64,
    seed: u64,
) -> Result<SpiralDataset, PathError> {
    if n < 2 || n % 2 != 0 {
        return Err(PathError::BadSampleCount(n));
    }
    if timesteps < 2 {
        return Err(PathError::TooFewTimesteps(timesteps));
    }
    if sigma < 0.0 {
        return Err(PathError::NegativeSigma(sigma));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut samples = Vec::with_capacity(n);
    for idx in 0..n {
        let label = usize::from(idx >= n / 2);
        let mut timestamps = Vec::with_capacity(timesteps);
        let mut values = Vec::with_capacity(timesteps * CHANNELS);
        for j in 0..timesteps {
            let frac = j as f64 / (timesteps - 1) as f64;
            let angle = SPIRAL_TURNS_ANGLE * frac;
            let radius = SPIRAL_RADIUS_MIN + (SPIRAL_RADIUS_MAX - SPIRAL_RADIUS_MIN) * frac;
            let (mut x, mut y) = (radius * angle.cos(), radius * angle.sin());
            if label == 1 {
                y = -y;
            }
            if sigma > 0.0 {
                let nx: f64 = normal.sample(&mut rng);
                let ny: f64 = normal.sample(&mut rng);
                x += sigma * nx;
                y += sigma * ny;
            }
            timestamps.push(frac);
            values.extend_from_slice(&[frac, x, y]);
        }
        let series = TimeSeries::new(timestamps, values, CHANNELS).expect("constructed increasing");
        samples.push((series, label));
    }
    Ok(SpiralDataset { samples, seed })
}

/// Natural cubic spline per channel: a + b dt + c dt^2 + d dt^3 on each
/// knot interval, with zero second derivative at both boundary knots.
#[derive(Debug, Clone)]
pub struct SplinePath {
    knots: Vec<f64>,
    /// [interval][channel] -> (a, b, c, d)
    coeffs: Vec<Vec<[f64; 4]>>,
    channels: usize,
}

/// Fits one natural cubic spline per channel through every knot.
pub fn fit_natural_cubic(series: &TimeSeries) -> Result<SplinePath, PathError> {
    let t = series.timestamps();
    let n = t.len();
    if n < 2 {
        return Err(PathError::TooFewTimesteps(n));
    }
    let channels = series.channels();
    let h: Vec<f64> = (0..n - 1).map(|i| t[i + 1] - t[i]).collect();

    let mut coeffs = vec![vec![[0.0; 4]; channels]; n - 1];
    for ch in 0..channels {
        let y: Vec<f64> = (0..n).map(|i| series.row(i)[ch]).collect();
        let m = second_derivatives(t, &h, &y);
        for i in 0..n - 1 {
            let a = y[i];
            let b = (y[i + 1] - y[i]) / h[i] - h[i] * (2.0 * m[i] + m[i + 1]) / 6.0;
            let c = m[i] / 2.0;
            let d = (m[i + 1] - m[i]) / (6.0 * h[i]);
            coeffs[i][ch] = [a, b, c, d];
        }
    }
    Ok(SplinePath { knots: t.to_vec(), coeffs, channels })
}

/// Tridiagonal (Thomas) solve for the interior second derivatives with
/// natural boundary conditions m_0 = m_{n-1} = 0.
fn second_derivatives(t: &[f64], h: &[f64], y: &[f64]) -> Vec<f64> {
    let n = t.len();
    let mut m = vec![0.0; n];
    if n <= 2 {
        return m;
    }
    let interior = n - 2;
    let mut diag = vec![0.0; interior];
    let mut rhs = vec![0.0; interior];
    for i in 0..interior {
        diag[i] = 2.0 * (h[i] + h[i + 1]);
        rhs[i] = 6.0 * ((y[i + 2] - y[i + 1]) / h[i + 1] - (y[i + 1] - y[i]) / h[i]);
    }
    // Forward elimination: sub/super diagonals are h[1..n-2].
    for i in 1..interior {
        let w = h[i] / diag[i - 1];
        diag[i] -= w * h[i];
        rhs[i] -= w * rhs[i - 1];
    }
    m[interior] = rhs[interior - 1] / diag[interior - 1];
    for i in (1..interior).rev() {
        m[i] = (rhs[i - 1] - h[i] * m[i + 1]) / diag[i - 1];
    }
    m
}

impl SplinePath {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn t_start(&self) -> f64 {
        self.knots[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Clamps `t` into the knot span and locates its interval.
    fn locate(&self, t: f64) -> (usize, f64, bool) {
        let (lo, hi) = (self.t_start(), self.t_end());
        let clamped = t < lo || t > hi;
        let tc = t.clamp(lo, hi);
        // partition_point returns the first knot > tc; the interval is one before.
        let idx = self.knots.partition_point(|&k| k <= tc).saturating_sub(1);
        let idx = idx.min(self.knots.len() - 2);
        (idx, tc - self.knots[idx], clamped)
    }

    /// Path value at `t`. Evaluation outside the knot span is clamped to the
    /// nearest endpoint; the flag reports whether clamping happened.
    pub fn eval_at(&self, t: f64) -> (Vec<f64>, bool) {
        let (idx, dt, clamped) = self.locate(t);
        let values = self.coeffs[idx]
            .iter()
            .map(|&[a, b, c, d]| a + dt * (b + dt * (c + dt * d)))
            .collect();
        (values, clamped)
    }

    /// Analytic derivative of the containing cubic at `t`, clamped like
    /// [`SplinePath::eval_at`].
    pub fn derivative_at(&self, t: f64) -> (Vec<f64>, bool) {
        let (idx, dt, clamped) = self.locate(t);
        let values = self.coeffs[idx]
            .iter()
            .map(|&[_, b, c, d]| b + dt * (2.0 * c + dt * 3.0 * d))
            .collect();
        (values, clamped)
    }

    /// Second derivative at `t`; used to verify the natural boundary.
    pub fn second_derivative_at(&self, t: f64) -> Vec<f64> {
        let (idx, dt, _) = self.locate(t);
        self.coeffs[idx].iter().map(|&[_, _, c, d]| 2.0 * c + 6.0 * d * dt).collect()
    }
}
