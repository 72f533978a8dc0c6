//! Banded and dense linear algebra shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Tridiagonal matrix stored by diagonals.
///
/// `lower[i]` holds entry `(i, i-1)` and `upper[i]` holds `(i, i+1)`; the
/// out-of-range slots `lower[0]` and `upper[n-1]` are kept at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiagonal {
    pub fn zeros(n: usize) -> Self {
        Self {
            lower: vec![0.0; n],
            diag: vec![0.0; n],
            upper: vec![0.0; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n);
        t.diag.iter_mut().for_each(|d| *d = 1.0);
        t
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// Entry `(i, j)`; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.diag[i]
        } else if j + 1 == i {
            self.lower[i]
        } else if i + 1 == j {
            self.upper[i]
        } else {
            0.0
        }
    }

    /// `self + alpha * other`.
    pub fn add_scaled(&self, alpha: f64, other: &Tridiagonal) -> Tridiagonal {
        let zip = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a + alpha * b).collect();
        Tridiagonal {
            lower: zip(&self.lower, &other.lower),
            diag: zip(&self.diag, &other.diag),
            upper: zip(&self.upper, &other.upper),
        }
    }

    pub fn mul_slice(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        debug_assert_eq!(x.len(), n);
        debug_assert_eq!(out.len(), n);
        if n == 1 {
            out[0] = self.diag[0] * x[0];
            return;
        }
        out[0] = self.diag[0] * x[0] + self.upper[0] * x[1];
        for i in 1..n - 1 {
            out[i] = self.lower[i] * x[i - 1] + self.diag[i] * x[i] + self.upper[i] * x[i + 1];
        }
        out[n - 1] = self.lower[n - 1] * x[n - 2] + self.diag[n - 1] * x[n - 1];
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.mul_slice(x.as_slice(), out.as_mut_slice());
        out
    }

    /// Product with a dense matrix, column by column.
    pub fn mul_dense(&self, q: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(q.nrows(), self.dim(), "tridiagonal product dimension");
        let mut out = DMatrix::zeros(q.nrows(), q.ncols());
        for j in 0..q.ncols() {
            let col = q.column(j);
            let mut dst = out.column_mut(j);
            self.mul_slice(col.as_slice(), dst.as_mut_slice());
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.get(i, j))
    }

    pub fn factor(&self) -> Result<TridiagonalLu> {
        TridiagonalLu::new(self)
    }

    /// Solves `self * x = rhs` in place.
    pub fn solve_in_place(&self, rhs: &mut [f64]) -> Result<()> {
        self.factor()?.solve_in_place(rhs);
        Ok(())
    }
}

/// Precomputed Thomas elimination of a tridiagonal matrix (no pivoting).
#[derive(Debug, Clone)]
pub struct TridiagonalLu {
    lower: Vec<f64>,
    inv_pivot: Vec<f64>,
    upper: Vec<f64>,
}

impl TridiagonalLu {
    pub fn new(m: &Tridiagonal) -> Result<Self> {
        let n = m.dim();
        let mut inv_pivot = vec![0.0; n];
        let mut upper = vec![0.0; n];
        let mut prev_upper = 0.0;
        for i in 0..n {
            let pivot = m.diag[i] - if i > 0 { m.lower[i] * prev_upper } else { 0.0 };
            if pivot == 0.0 || !pivot.is_finite() {
                return Err(Error::SolveFailure { row: i });
            }
            inv_pivot[i] = 1.0 / pivot;
            upper[i] = if i + 1 < n { m.upper[i] * inv_pivot[i] } else { 0.0 };
            prev_upper = upper[i];
        }
        Ok(Self {
            lower: m.lower.clone(),
            inv_pivot,
            upper,
        })
    }

    pub fn dim(&self) -> usize {
        self.inv_pivot.len()
    }

    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let n = self.dim();
        debug_assert_eq!(rhs.len(), n);
        rhs[0] *= self.inv_pivot[0];
        for i in 1..n {
            rhs[i] = (rhs[i] - self.lower[i] * rhs[i - 1]) * self.inv_pivot[i];
        }
        for i in (0..n.saturating_sub(1)).rev() {
            rhs[i] -= self.upper[i] * rhs[i + 1];
        }
    }
}

/// Thin singular value decomposition with singular values in descending order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

impl Svd {
    pub fn rank(&self, rel_tol: f64) -> usize {
        let top = self.singular_values.get(0).copied().unwrap_or(0.0);
        self.singular_values
            .iter()
            .filter(|&&s| s > rel_tol * top && s > 0.0)
            .count()
    }

    /// `U_k Σ_k V_kᵀ`.
    pub fn reconstruct(&self, k: usize) -> DMatrix<f64> {
        let k = k.min(self.singular_values.len());
        let mut us = self.u.columns(0, k).into_owned();
        for j in 0..k {
            us.column_mut(j).scale_mut(self.singular_values[j]);
        }
        us * self.v_t.rows(0, k)
    }
}

pub fn thin_svd(a: &DMatrix<f64>) -> Result<Svd> {
    if a.is_empty() {
        return Err(Error::InvalidInput("SVD of an empty matrix".into()));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("SVD input has non-finite entries".into()));
    }
    let svd =
        nalgebra::linalg::SVD::try_new(a.clone(), true, true, f64::EPSILON, 0).ok_or(Error::ConvergenceFailure)?;
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::ConvergenceFailure),
    };
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
    let k = order.len();
    let u = DMatrix::from_fn(u.nrows(), k, |r, c| u[(r, order[c])]);
    let v_t = DMatrix::from_fn(k, v_t.ncols(), |r, c| v_t[(order[r], c)]);
    let singular_values = DVector::from_iterator(k, order.iter().map(|&i| s[i]));
    Ok(Svd {
        u,
        singular_values,
        v_t,
    })
}

/// Least-squares solution of a small dense system via SVD pseudo-inverse.
pub fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = thin_svd(a)?;
    let tol = svd.singular_values.get(0).copied().unwrap_or(0.0) * f64::EPSILON * a.nrows().max(a.ncols()) as f64;
    let utb = svd.u.transpose() * b;
    let mut coeffs = DVector::zeros(svd.singular_values.len());
    for i in 0..coeffs.len() {
        let s = svd.singular_values[i];
        if s > tol {
            coeffs[i] = utb[i] / s;
        }
    }
    Ok(svd.v_t.transpose() * coeffs)
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.norm()
}
