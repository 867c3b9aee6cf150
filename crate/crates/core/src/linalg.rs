//! Dense linear-algebra kernels for the distribution heads.
//!
//! Everything here is small and unblocked on purpose: the response
//! dimensions this engine targets are modest (tens, not thousands), so
//! plain O(D^3) loops beat the complexity of a BLAS binding. Positive
//! definiteness is detected by factorization success rather than an
//! eigendecomposition, which is also how the likelihoods consume these
//! matrices (triangular solves and log-determinants of the factor).

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense square matrix in row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl SquareMatrix {
    /// Creates a zero matrix of the given dimension.
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "matrix dimension must be at least 1");
        SquareMatrix {
            dim,
            entries: vec![0.0; dim * dim],
        }
    }

    /// Creates an identity matrix of the given dimension.
    pub fn identity(dim: usize) -> Self {
        let mut m = SquareMatrix::zeros(dim);
        for i in 0..dim {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix from row-major entries.
    pub fn from_entries(dim: usize, entries: Vec<f64>) -> Self {
        assert_eq!(entries.len(), dim * dim, "entry count must equal dim^2");
        assert!(dim >= 1, "matrix dimension must be at least 1");
        SquareMatrix { dim, entries }
    }

    /// Builds a matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let dim = rows.len();
        let mut entries = Vec::with_capacity(dim * dim);
        for row in rows {
            assert_eq!(row.len(), dim, "rows must form a square matrix");
            entries.extend_from_slice(row);
        }
        SquareMatrix::from_entries(dim, entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.entries[i * self.dim + j] = value;
    }

    /// Row-major view of the entries.
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Largest absolute entry; zero matrices return 0.
    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |acc, e| acc.max(e.abs()))
    }

    fn is_symmetric(&self, rel_tol: f64) -> bool {
        let scale = self.max_abs().max(1.0);
        for i in 0..self.dim {
            for j in 0..i {
                if (self.get(i, j) - self.get(j, i)).abs() > rel_tol * scale {
                    return false;
                }
            }
        }
        true
    }
}

/// Lower-triangular matrix with a strictly positive diagonal, stored as the
/// diagonal plus the strictly-lower entries in row-major order
/// (l21, l31, l32, l41, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular {
    dim: usize,
    diag: Vec<f64>,
    offdiag: Vec<f64>,
}

/// Index of entry (i, j), j < i, within the row-major strictly-lower storage.
#[inline]
pub(crate) fn lower_index(i: usize, j: usize) -> usize {
    debug_assert!(j < i);
    i * (i - 1) / 2 + j
}

impl LowerTriangular {
    /// Builds a factor from its diagonal and strictly-lower entries.
    pub fn new(diag: Vec<f64>, offdiag: Vec<f64>) -> Self {
        let dim = diag.len();
        assert!(dim >= 1, "factor dimension must be at least 1");
        assert!(
            diag.iter().all(|&d| d > 0.0),
            "factor diagonal must be strictly positive"
        );
        assert_eq!(
            offdiag.len(),
            dim * (dim - 1) / 2,
            "off-diagonal length must be dim*(dim-1)/2"
        );
        LowerTriangular { dim, diag, offdiag }
    }

    /// Identity factor of the given dimension.
    pub fn identity(dim: usize) -> Self {
        LowerTriangular::new(vec![1.0; dim], vec![0.0; dim * (dim - 1) / 2])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn offdiag(&self) -> &[f64] {
        &self.offdiag
    }

    /// Entry (i, j); zero above the diagonal.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.diag[i]
        } else if j < i {
            self.offdiag[lower_index(i, j)]
        } else {
            0.0
        }
    }
}

/// Cholesky factorization of a symmetric positive definite matrix.
///
/// Returns the lower factor L with Sigma = L L^T. Fails with
/// `NotPositiveDefinite` when a pivot is non-positive or non-finite, which
/// is how an invalid covariance announces itself.
pub fn cholesky_factorize(m: &SquareMatrix) -> Result<LowerTriangular> {
    debug_assert!(
        m.is_symmetric(1e-10),
        "cholesky_factorize expects a symmetric matrix"
    );
    let (diag, offdiag) = cholesky_generic(m.dim, &m.entries)?;
    Ok(LowerTriangular {
        dim: m.dim,
        diag,
        offdiag,
    })
}

/// Composes Sigma = L L^T from a lower factor.
pub fn compose_cov_cholesky(l: &LowerTriangular) -> SquareMatrix {
    let d = l.dim;
    let mut out = SquareMatrix::zeros(d);
    for i in 0..d {
        for j in 0..=i {
            // Dot product of rows i and j of L, truncated at column j.
            let mut s = 0.0;
            for k in 0..=j {
                s += l.get(i, k) * l.get(j, k);
            }
            out.set(i, j, s);
            out.set(j, i, s);
        }
    }
    out
}

/// Composes Sigma = diag(kdiag) + V V^T from a positive diagonal and a
/// D x rank loading matrix given in row-major order.
pub fn compose_cov_lowrank(kdiag: &[f64], v: &[f64], rank: usize) -> SquareMatrix {
    let d = kdiag.len();
    assert!(rank >= 1, "low-rank composition needs rank >= 1");
    assert_eq!(v.len(), d * rank, "loading matrix must be dim x rank");
    debug_assert!(kdiag.iter().all(|&k| k > 0.0));
    let mut out = SquareMatrix::zeros(d);
    for i in 0..d {
        for j in 0..=i {
            let mut s = 0.0;
            for k in 0..rank {
                s += v[i * rank + k] * v[j * rank + k];
            }
            if i == j {
                s += kdiag[i];
            }
            out.set(i, j, s);
            out.set(j, i, s);
        }
    }
    out
}

/// Log-determinant of L L^T, i.e. twice the log-product of the factor's
/// diagonal.
pub fn logdet_triangular(l: &LowerTriangular) -> f64 {
    2.0 * l.diag.iter().map(|d| d.ln()).sum::<f64>()
}

/// Solves L x = b by forward substitution.
pub fn solve_lower(l: &LowerTriangular, b: &[f64]) -> Vec<f64> {
    assert_eq!(b.len(), l.dim, "right-hand side length must match dim");
    solve_lower_generic(l.dim, &l.diag, &l.offdiag, b)
}

/// Generic Cholesky on row-major full storage, usable with dual numbers.
/// Returns the factor as (diag, strictly-lower row-major).
pub(crate) fn cholesky_generic<T: Real>(dim: usize, a: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    debug_assert_eq!(a.len(), dim * dim);
    let mut diag: Vec<T> = Vec::with_capacity(dim);
    let mut off: Vec<T> = vec![T::from_f64(0.0); dim * (dim - 1) / 2];
    for j in 0..dim {
        let mut s = a[j * dim + j];
        for k in 0..j {
            let ljk = off[lower_index(j, k)];
            s = s - ljk * ljk;
        }
        let pivot = s.value();
        if !(pivot > 0.0) || !pivot.is_finite() {
            return Err(Error::NotPositiveDefinite);
        }
        let ljj = s.sqrt();
        diag.push(ljj);
        for i in (j + 1)..dim {
            let mut t = a[i * dim + j];
            for k in 0..j {
                t = t - off[lower_index(i, k)] * off[lower_index(j, k)];
            }
            off[lower_index(i, j)] = t / ljj;
        }
    }
    Ok((diag, off))
}

/// Generic forward substitution on the (diag, strictly-lower) layout.
pub(crate) fn solve_lower_generic<T: Real>(
    dim: usize,
    diag: &[T],
    offdiag: &[T],
    b: &[T],
) -> Vec<T> {
    let mut x: Vec<T> = Vec::with_capacity(dim);
    for i in 0..dim {
        let mut s = b[i];
        for j in 0..i {
            s = s - offdiag[lower_index(i, j)] * x[j];
        }
        x.push(s / diag[i]);
    }
    x
}
