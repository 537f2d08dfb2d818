//! Small dense linear-algebra kernels.
//!
//! Everything here is written as explicit ascending-index loops so results are
//! bit-reproducible across runs and so summation order is fixed (several
//! callers assert bitwise determinism). Matrices stay small in this crate
//! (embedding dimension, not image dimension), so no blocking is needed.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Row vector times matrix: `v (1×r) · m (r×c) -> (1×c)`.
pub fn vecmat(v: ArrayView1<f64>, m: ArrayView2<f64>) -> Array1<f64> {
    assert_eq!(v.len(), m.nrows(), "vecmat shape");
    let mut out = Array1::zeros(m.ncols());
    for j in 0..m.ncols() {
        let mut acc = 0.0;
        for i in 0..m.nrows() {
            acc += v[i] * m[(i, j)];
        }
        out[j] = acc;
    }
    out
}

/// Matrix times column vector: `m (r×c) · v (c×1) -> (r×1)`.
pub fn matvec(m: ArrayView2<f64>, v: ArrayView1<f64>) -> Array1<f64> {
    assert_eq!(v.len(), m.ncols(), "matvec shape");
    let mut out = Array1::zeros(m.nrows());
    for i in 0..m.nrows() {
        let mut acc = 0.0;
        for j in 0..m.ncols() {
            acc += m[(i, j)] * v[j];
        }
        out[i] = acc;
    }
    out
}

/// Outer product `aᵀ b` of two row vectors.
pub fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[(i, j)] = a[i] * b[j];
        }
    }
    out
}

/// Dot product with fixed left-to-right summation.
pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    assert_eq!(a.len(), b.len(), "dot shape");
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvalues sorted descending
/// and eigenvectors as the corresponding columns. Input must be symmetric;
/// only the upper triangle is read.
pub fn eigh(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::shape(format!(
            "eigh expects a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut m = a.clone();
    // Symmetrize from the upper triangle so tiny asymmetries cannot stall
    // convergence.
    for i in 0..n {
        for j in 0..i {
            m[(i, j)] = m[(j, i)];
        }
    }
    let mut v: Array2<f64> = Array2::eye(n);
    let scale: f64 = {
        let mut s = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                s = s.max(m[(i, j)].abs());
            }
        }
        s.max(1e-300)
    };
    let tol = 1e-14 * scale;

    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(m[(p, q)].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[(j, j)]
            .partial_cmp(&m[(i, i)])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut vals = Array1::zeros(n);
    let mut vecs = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vals[dst] = m[(src, src)];
        for k in 0..n {
            vecs[(k, dst)] = v[(k, src)];
        }
    }
    Ok((vals, vecs))
}

/// Cholesky factorization `a = L Lᵀ` of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Array2<f64>,
}

impl Cholesky {
    pub fn factor(a: &Array2<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::shape(format!(
                "cholesky expects a square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let mut l: Array2<f64> = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let mut sum = a[(i, j)];
                for k in 0..j {
                    sum -= l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    if sum <= 0.0 || !sum.is_finite() {
                        return Err(Error::numeric(
                            "cholesky",
                            format!("matrix not positive definite (pivot {i} = {sum:e})"),
                        ));
                    }
                    l[(i, j)] = sum.sqrt();
                } else {
                    l[(i, j)] = sum / l[(j, j)];
                }
            }
        }
        Ok(Cholesky { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Lower-triangular factor.
    pub fn l(&self) -> &Array2<f64> {
        &self.l
    }

    /// `log |a|` of the factored matrix.
    pub fn log_det(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dim() {
            acc += self.l[(i, i)].ln();
        }
        2.0 * acc
    }

    /// Solves `a x = b`.
    pub fn solve(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n, "cholesky solve shape");
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let mut sum = b[i];
            for k in 0..i {
                sum -= self.l[(i, k)] * y[k];
            }
            y[i] = sum / self.l[(i, i)];
        }
        let mut x = Array1::zeros(n);
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in (i + 1)..n {
                sum -= self.l[(k, i)] * x[k];
            }
            x[i] = sum / self.l[(i, i)];
        }
        x
    }

    /// Quadratic form `bᵀ a⁻¹ b`, evaluated via the triangular solve so the
    /// result is a sum of squares (exactly sign-symmetric in `b`).
    pub fn quad_form(&self, b: ArrayView1<f64>) -> f64 {
        let n = self.dim();
        assert_eq!(b.len(), n, "cholesky quad_form shape");
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let mut sum = b[i];
            for k in 0..i {
                sum -= self.l[(i, k)] * y[k];
            }
            y[i] = sum / self.l[(i, i)];
        }
        let mut acc = 0.0;
        for i in 0..n {
            acc += y[i] * y[i];
        }
        acc
    }

    /// Dense inverse of the factored matrix.
    pub fn inverse(&self) -> Array2<f64> {
        let n = self.dim();
        let mut inv = Array2::zeros((n, n));
        for j in 0..n {
            let mut e = Array1::zeros(n);
            e[j] = 1.0;
            let col = self.solve(e.view());
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        // Exact symmetry by construction keeps downstream factorizations from
        // seeing rounding-level asymmetry.
        for i in 0..n {
            for j in 0..i {
                let avg = 0.5 * (inv[(i, j)] + inv[(j, i)]);
                inv[(i, j)] = avg;
                inv[(j, i)] = avg;
            }
        }
        inv
    }
}

/// Multivariate normal log-density with full covariance.
pub fn mvn_log_density(
    x: ArrayView1<f64>,
    mean: ArrayView1<f64>,
    cov_chol: &Cholesky,
) -> f64 {
    let d = x.len();
    let diff = &x.to_owned() - &mean;
    let q = cov_chol.quad_form(diff.view());
    -0.5 * (d as f64 * LN_2PI + cov_chol.log_det() + q)
}

pub const LN_2PI: f64 = 1.8378770664093453;

/// `log Σ exp(w_i)` with the usual max shift. Returns `-inf` on an empty or
/// all `-inf` input.
pub fn log_sum_exp(w: &[f64]) -> f64 {
    let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let mut acc = 0.0;
    for &wi in w {
        acc += (wi - m).exp();
    }
    m + acc.ln()
}

/// `log (1/n) Σ exp(w_i)`. Dividing the shifted sum before taking the log
/// keeps the result exact when all weights are equal (the mean of the shifted
/// exponentials is exactly 1).
pub fn log_mean_exp(w: &[f64]) -> f64 {
    let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let mut acc = 0.0;
    for &wi in w {
        acc += (wi - m).exp();
    }
    m + (acc / w.len() as f64).ln()
}
