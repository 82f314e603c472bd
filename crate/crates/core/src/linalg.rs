//! Kernels for the unitary/orthogonal weight constraints: matrix exponential
//! of skew-symmetric generators (exponential-map parametrization) and polar
//! projection back onto the orthogonal group (projection method).

use thiserror::Error;

/// Orthogonality residual the polar projection iterates down to.
pub const POLAR_TOL: f64 = 1e-12;
/// Iteration cap for the Newton-Schulz loop.
pub const POLAR_MAX_ITERS: usize = 100;
/// Taylor terms used by `expm` after scaling the norm below 0.5.
/// The tail 0.5^20/20! is far below f64 machine precision.
const EXPM_TAYLOR_TERMS: usize = 20;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix orders differ: {0} vs {1}")]
    OrderMismatch(usize, usize),
    #[error(
        "polar projection did not converge: residual {residual:.3e} after {iterations} iterations"
    )]
    ProjectionFailure { residual: f64, iterations: usize },
    #[error("matrix contains non-finite entries")]
    NonFinite,
}

/// Dense square matrix of 64-bit floats, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Wraps a row-major slice of length n*n.
    pub fn from_slice(n: usize, data: &[f64]) -> Result<Self, LinalgError> {
        if data.len() != n * n {
            return Err(LinalgError::NotSquare { rows: n, cols: data.len() / n.max(1) });
        }
        Ok(Self { n, data: data.to_vec() })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.data[i * n + j] = f(i, j);
            }
        }
        m
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let n = self.n;
        Self::from_fn(n, |i, j| self.data[j * n + i])
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.n, other.n, "matmul order mismatch");
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let aik = self.data[i * n + k];
                if aik == 0.0 {
                    continue;
                }
                let row = &other.data[k * n..(k + 1) * n];
                let dst = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    dst[j] += aik * row[j];
                }
            }
        }
        out
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { n: self.n, data: self.data.iter().map(|v| v * c).collect() }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.n, other.n);
        Self {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.n, other.n);
        Self {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Maximum absolute column sum.
    pub fn norm_1(&self) -> f64 {
        let n = self.n;
        (0..n)
            .map(|j| (0..n).map(|i| self.data[i * n + j].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        let n = self.n;
        (0..n)
            .map(|i| self.data[i * n..(i + 1) * n].iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Matrix exponential by scaling-and-squaring over a truncated Taylor series.
///
/// The input is scaled by 2^-s so its 1-norm is at most 0.5, the series is
/// summed by Horner's rule to a machine-precision tail, and the result is
/// squared s times.
pub fn expm(a: &SquareMatrix) -> SquareMatrix {
    let n = a.order();
    let norm = a.norm_1();
    let s: i32 = if norm <= 0.5 { 0 } else { (norm / 0.5).log2().ceil() as i32 };
    let b = a.scaled(0.5f64.powi(s));

    // Horner: P_k = I + B * P_{k+1} / k accumulates sum B^k / k!.
    let identity = SquareMatrix::identity(n);
    let mut p = identity.clone();
    for k in (1..=EXPM_TAYLOR_TERMS).rev() {
        p = identity.add(&b.matmul(&p).scaled(1.0 / k as f64));
    }

    let mut e = p;
    for _ in 0..s {
        e = e.matmul(&e);
    }
    e
}

/// Adjoint of the Frechet derivative of `expm` at `a`, applied to the
/// upstream gradient `g`.
///
/// Computed as the top-right n-by-n block of the exponential of the 2n-by-2n
/// block matrix [[A^T, G], [0, A^T]].
pub fn expm_vjp(a: &SquareMatrix, g: &SquareMatrix) -> Result<SquareMatrix, LinalgError> {
    let n = a.order();
    if g.order() != n {
        return Err(LinalgError::OrderMismatch(n, g.order()));
    }
    let at = a.transpose();
    let mut block = SquareMatrix::zeros(2 * n);
    for i in 0..n {
        for j in 0..n {
            block.set(i, j, at.get(i, j));
            block.set(i, n + j, g.get(i, j));
            block.set(n + i, n + j, at.get(i, j));
        }
    }
    let e = expm(&block);
    Ok(SquareMatrix::from_fn(n, |i, j| e.get(i, n + j)))
}

/// A - A^T. The result is exactly antisymmetric.
pub fn skew(a: &SquareMatrix) -> SquareMatrix {
    let n = a.order();
    SquareMatrix::from_fn(n, |i, j| a.get(i, j) - a.get(j, i))
}

/// Nearest orthogonal matrix in Frobenius norm (the polar factor), via the
/// Newton-Schulz iteration X <- 1.5 X - 0.5 X X^T X.
///
/// The input is pre-scaled by an upper bound on its spectral norm,
/// sqrt(norm_1 * norm_inf), which places every singular value in (0, 1] and
/// guarantees convergence for nonsingular input.
pub fn polar_project(m: &SquareMatrix) -> Result<SquareMatrix, LinalgError> {
    if !m.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let bound = (m.norm_1() * m.norm_inf()).sqrt();
    if bound == 0.0 {
        return Err(LinalgError::ProjectionFailure { residual: f64::INFINITY, iterations: 0 });
    }
    let mut x = m.scaled(1.0 / bound);
    for _ in 0..POLAR_MAX_ITERS {
        if orthogonality_error(&x) <= POLAR_TOL {
            return Ok(x);
        }
        let xtx = x.transpose().matmul(&x);
        x = x.scaled(1.5).sub(&x.matmul(&xtx).scaled(0.5));
        if !x.is_finite() {
            return Err(LinalgError::NonFinite);
        }
    }
    let residual = orthogonality_error(&x);
    if residual <= POLAR_TOL {
        Ok(x)
    } else {
        Err(LinalgError::ProjectionFailure { residual, iterations: POLAR_MAX_ITERS })
    }
}

/// || W^T W - I ||_F, the instrument every constraint check reads.
pub fn orthogonality_error(w: &SquareMatrix) -> f64 {
    let n = w.order();
    let wtw = w.transpose().matmul(w);
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            let d = wtw.get(i, j) - target;
            sum += d * d;
        }
    }
    sum.sqrt()
}
