//! Independent numerical oracles for the test suites. Everything here is
//! deliberately brute-force and shares no code with the library it checks:
//! long Taylor sums in double-double arithmetic, a Jacobi eigensolver, LU
//! determinants, and finite-difference helpers.

/// Double-double value: `hi + lo` with |lo| <= ulp(hi)/2. Enough bits to
/// make a 60-term Taylor sum exact far below 1e-10.
#[derive(Debug, Clone, Copy, Default)]
pub struct DoubleDouble {
    hi: f64,
    lo: f64,
}

impl DoubleDouble {
    pub fn from(v: f64) -> Self {
        Self { hi: v, lo: 0.0 }
    }

    pub fn value(self) -> f64 {
        self.hi + self.lo
    }

    fn two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        let bb = s - a;
        let err = (a - (s - bb)) + (b - bb);
        (s, err)
    }

    fn two_prod(a: f64, b: f64) -> (f64, f64) {
        let p = a * b;
        let err = f64::mul_add(a, b, -p);
        (p, err)
    }

    pub fn add(self, other: Self) -> Self {
        let (s, e) = Self::two_sum(self.hi, other.hi);
        let e = e + self.lo + other.lo;
        let (hi, lo) = Self::two_sum(s, e);
        Self { hi, lo }
    }

    pub fn add_prod(self, a: f64, b: f64) -> Self {
        let (p, e) = Self::two_prod(a, b);
        self.add(Self { hi: p, lo: e })
    }

    pub fn scale(self, c: f64) -> Self {
        let (p, e) = Self::two_prod(self.hi, c);
        let lo = self.lo * c + e;
        let (hi, lo) = Self::two_sum(p, lo);
        Self { hi, lo }
    }
}

/// n-by-n matrix product with double-double accumulated dot products,
/// rounded back to f64.
pub fn matmul_dd(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = DoubleDouble::default();
            for k in 0..n {
                acc = acc.add_prod(a[i * n + k], b[k * n + j]);
            }
            out[i * n + j] = acc.value();
        }
    }
    out
}

/// Brute-force matrix exponential: `terms` Taylor terms, no scaling, with
/// double-double accumulation in every dot product and in the running sum.
pub fn expm_taylor_dd(a: &[f64], n: usize, terms: usize) -> Vec<f64> {
    let mut sum: Vec<DoubleDouble> = (0..n * n)
        .map(|idx| DoubleDouble::from(if idx % (n + 1) == 0 { 1.0 } else { 0.0 }))
        .collect();
    let mut power: Vec<f64> = (0..n * n)
        .map(|idx| if idx % (n + 1) == 0 { 1.0 } else { 0.0 })
        .collect();
    let mut factorial_inv = DoubleDouble::from(1.0);
    for k in 1..=terms {
        power = matmul_dd(&power, a, n);
        factorial_inv = factorial_inv.scale(1.0 / k as f64);
        let c = factorial_inv.value();
        for (s, &p) in sum.iter_mut().zip(&power) {
            *s = s.add_prod(p, c);
        }
    }
    sum.into_iter().map(DoubleDouble::value).collect()
}

/// Jacobi eigendecomposition of a symmetric matrix. Returns (eigenvalues,
/// eigenvectors as columns).
pub fn symmetric_eig_jacobi(m: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = m.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues = (0..n).map(|i| a[i * n + i]).collect();
    (eigenvalues, v)
}

/// Polar factor by eigendecomposition: U = M (M^T M)^{-1/2}.
pub fn polar_by_eig(m: &[f64], n: usize) -> Vec<f64> {
    // G = M^T M is symmetric positive definite for nonsingular M.
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += m[k * n + i] * m[k * n + j];
            }
            gram[i * n + j] = s;
        }
    }
    let (eigenvalues, v) = symmetric_eig_jacobi(&gram, n);
    // inv_sqrt = V diag(1/sqrt(lambda)) V^T
    let mut inv_sqrt = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += v[i * n + k] * v[j * n + k] / eigenvalues[k].sqrt();
            }
            inv_sqrt[i * n + j] = s;
        }
    }
    let mut u = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += m[i * n + k] * inv_sqrt[k * n + j];
            }
            u[i * n + j] = s;
        }
    }
    u
}

/// Determinant by LU decomposition with partial pivoting.
pub fn lu_det(m: &[f64], n: usize) -> f64 {
    let mut a = m.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if a[pivot * n + col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            det = -det;
        }
        det *= a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
        }
    }
    det
}

/// Frobenius distance between equal-length buffers.
pub fn frobenius_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Central finite difference of a scalar function.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Worst relative disagreement between analytic and numerical gradients.
/// The denominator is floored so near-zero entries are compared through
/// their absolute error at the floor's scale.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
