use nalgebra::DMatrix;

use super::EstimatorError;
use crate::linalg::{self, LinalgError};

/// Leading principal components of a return window and the inverse of their
/// variances.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaEstimate {
    pub k: usize,
    /// `p x k`, columns ordered by decreasing eigenvalue.
    pub components: DMatrix<f64>,
    /// Diagonal of the `k x k` reduced precision, `1 / lambda` in the same order.
    pub reduced_precision: Vec<f64>,
    pub explained_fraction: f64,
}

/// Keeps the smallest number of components whose cumulative variance share
/// reaches `threshold`.
pub fn pca_precision(window: &DMatrix<f64>, threshold: f64) -> Result<PcaEstimate, EstimatorError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(EstimatorError::InvalidParameter(format!(
            "explained-variance threshold must lie in (0, 1], got {threshold}"
        )));
    }
    let s = linalg::sample_covariance(window)?;
    let eig = linalg::sym_eigen(&s);
    let p = s.dim();
    // clamp round-off negatives of a PSD spectrum
    let desc: Vec<f64> = eig.eigenvalues.iter().rev().map(|&l| l.max(0.0)).collect();
    let total: f64 = desc.iter().sum();
    if total <= 0.0 {
        return Err(EstimatorError::Degenerate("window has zero total variance".into()));
    }
    let mut cum = 0.0;
    let mut k = p;
    for (i, &l) in desc.iter().enumerate() {
        cum += l;
        // small slack so an exact share of `threshold` is not lost to rounding
        if cum / total >= threshold - 1e-12 {
            k = i + 1;
            break;
        }
    }
    let retained: f64 = desc[..k].iter().sum();
    if desc[k - 1] <= eig.singular_cutoff() {
        return Err(LinalgError::Singular {
            lambda_min: desc[k - 1],
            lambda_max: desc[0],
        }
        .into());
    }
    let mut components = DMatrix::zeros(p, k);
    for c in 0..k {
        components.set_column(c, &eig.eigenvectors.column(p - 1 - c));
    }
    Ok(PcaEstimate {
        k,
        components,
        reduced_precision: desc[..k].iter().map(|l| 1.0 / l).collect(),
        explained_fraction: retained / total,
    })
}
