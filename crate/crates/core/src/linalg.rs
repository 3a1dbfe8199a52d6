//! Dense symmetric-matrix primitives.
//!
//! Every spectral quantity in the crate (conditioning, inversion, PCA) is
//! derived from one [`EigenDecomposition`], so the singular path and the
//! condition-number path always agree on what "singular" means.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance used when checking `|a_ij - a_ji|`.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Eigenvalues at or below `SINGULAR_REL_TOL * lambda_max` count as zero.
pub const SINGULAR_REL_TOL: f64 = 1e-12;

/// Eigenvalues below `-PSD_REL_TOL * |lambda|_max` mean the matrix is not PSD.
pub const PSD_REL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is empty")]
    Empty,

    #[error("matrix is not symmetric: |a[{i},{j}] - a[{j},{i}]| = {gap:e}")]
    NotSymmetric { i: usize, j: usize, gap: f64 },

    #[error("matrix contains a non-finite entry at ({i},{j})")]
    NonFinite { i: usize, j: usize },

    #[error("insufficient data: need at least {required} rows, got {actual}")]
    InsufficientData { required: usize, actual: usize },

    #[error("matrix is singular: lambda_min = {lambda_min:e}, lambda_max = {lambda_max:e}")]
    Singular { lambda_min: f64, lambda_max: f64 },

    #[error("matrix is not positive semidefinite: lambda_min = {lambda_min:e}")]
    NotPsd { lambda_min: f64 },
}

/// A square matrix whose symmetry has been checked.
///
/// Construction through [`SymmetricMatrix::new`] rejects asymmetric input;
/// [`SymmetricMatrix::symmetrize`] averages `(A + A^T)/2` for solver output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetricMatrix(DMatrix<f64>);

impl SymmetricMatrix {
    pub fn new(a: DMatrix<f64>) -> Result<Self, LinalgError> {
        check_square(&a)?;
        check_finite(&a)?;
        let p = a.nrows();
        for i in 0..p {
            for j in (i + 1)..p {
                let gap = (a[(i, j)] - a[(j, i)]).abs();
                if gap > SYMMETRY_TOL * a[(i, j)].abs().max(1.0) {
                    return Err(LinalgError::NotSymmetric { i, j, gap });
                }
            }
        }
        Ok(Self(a))
    }

    /// Averages the matrix with its transpose.
    pub fn symmetrize(a: DMatrix<f64>) -> Result<Self, LinalgError> {
        check_square(&a)?;
        check_finite(&a)?;
        let t = a.transpose();
        Ok(Self((a + t) * 0.5))
    }

    pub fn identity(p: usize) -> Self {
        Self(DMatrix::identity(p, p))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.0.diagonal().iter().copied().collect()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    /// Symmetric permutation `P A P^T`: entry `(i, j)` of the result is
    /// `a[perm[i], perm[j]]`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        let p = self.dim();
        Self(DMatrix::from_fn(p, p, |i, j| self.0[(perm[i], perm[j])]))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }
}

impl AsRef<DMatrix<f64>> for SymmetricMatrix {
    fn as_ref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

fn check_square(a: &DMatrix<f64>) -> Result<(), LinalgError> {
    if a.nrows() != a.ncols() {
        return Err(LinalgError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    if a.nrows() == 0 {
        return Err(LinalgError::Empty);
    }
    Ok(())
}

fn check_finite(a: &DMatrix<f64>) -> Result<(), LinalgError> {
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            if !a[(i, j)].is_finite() {
                return Err(LinalgError::NonFinite { i, j });
            }
        }
    }
    Ok(())
}

/// Spectral factorization `A = U diag(lambda) U^T` with ascending eigenvalues.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    /// Column `k` is the unit eigenvector of `eigenvalues[k]`.
    pub eigenvectors: DMatrix<f64>,
}

impl EigenDecomposition {
    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn lambda_max(&self) -> f64 {
        *self.eigenvalues.last().expect("non-empty spectrum")
    }

    /// `U diag(f(lambda)) U^T`.
    pub fn reconstruct_with<F: Fn(f64) -> f64>(&self, f: F) -> DMatrix<f64> {
        let u = &self.eigenvectors;
        let mut scaled = u.clone();
        for (k, &lam) in self.eigenvalues.iter().enumerate() {
            let m = f(lam);
            scaled.column_mut(k).scale_mut(m);
        }
        &scaled * u.transpose()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.reconstruct_with(|l| l)
    }

    /// Singularity cutoff for this spectrum.
    pub fn singular_cutoff(&self) -> f64 {
        SINGULAR_REL_TOL * self.lambda_max().max(0.0)
    }

    fn check_psd(&self) -> Result<(), LinalgError> {
        let scale = self.lambda_max().abs().max(self.lambda_min().abs());
        if self.lambda_min() < -PSD_REL_TOL * scale {
            return Err(LinalgError::NotPsd {
                lambda_min: self.lambda_min(),
            });
        }
        Ok(())
    }

    pub fn condition_number(&self) -> Result<f64, LinalgError> {
        self.check_psd()?;
        let lmin = self.lambda_min();
        if lmin <= self.singular_cutoff() {
            return Ok(f64::INFINITY);
        }
        Ok(self.lambda_max() / lmin)
    }
}

/// Demeaned sample covariance with the `n - 1` denominator. Rows are
/// observations, columns are assets.
pub fn sample_covariance(window: &DMatrix<f64>) -> Result<SymmetricMatrix, LinalgError> {
    let (n, p) = window.shape();
    if n < 2 {
        return Err(LinalgError::InsufficientData {
            required: 2,
            actual: n,
        });
    }
    if p == 0 {
        return Err(LinalgError::Empty);
    }
    check_finite(window)?;
    let means = window.row_mean();
    let mut centered = window.clone();
    for mut row in centered.row_iter_mut() {
        row -= &means;
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    SymmetricMatrix::symmetrize(cov)
}

pub fn sym_eigen(a: &SymmetricMatrix) -> EigenDecomposition {
    let eig = SymmetricEigen::new(a.as_matrix().clone());
    let p = a.dim();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut eigenvectors = DMatrix::zeros(p, p);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    EigenDecomposition {
        eigenvalues,
        eigenvectors,
    }
}

/// `lambda_max / lambda_min`, or `f64::INFINITY` for a singular matrix.
pub fn condition_number(a: &SymmetricMatrix) -> Result<f64, LinalgError> {
    sym_eigen(a).condition_number()
}

/// Inverse of a symmetric positive-definite matrix via its spectrum.
pub fn invert_spd(a: &SymmetricMatrix) -> Result<SymmetricMatrix, LinalgError> {
    let eig = sym_eigen(a);
    invert_from_eigen(&eig)
}

pub fn invert_from_eigen(eig: &EigenDecomposition) -> Result<SymmetricMatrix, LinalgError> {
    eig.check_psd()?;
    if eig.lambda_min() <= eig.singular_cutoff() {
        return Err(LinalgError::Singular {
            lambda_min: eig.lambda_min(),
            lambda_max: eig.lambda_max(),
        });
    }
    SymmetricMatrix::symmetrize(eig.reconstruct_with(|l| 1.0 / l))
}

/// `||a - b||_F / ||b||_F`, falling back to the absolute distance when `b` is zero.
pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
