//! Hedge-regression view of the precision matrix.
//!
//! Regressing asset `i` on all other assets gives coefficients `beta_{i|j}`
//! and a residual ("unhedgeable") variance `v_i`, and
//!
//! ```text
//! psi_ii = 1 / v_i        psi_ij = -beta_{i|j} / v_i
//! ```
//!
//! With `v_i = RSS / (n - 1)` this reproduces `inverse(sample_covariance)`
//! exactly, which makes the module an oracle for the estimators. The per-row
//! Lasso variant is diagnostic only: its assembly is neither symmetric nor
//! guaranteed positive definite.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, SymmetricMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HedgeError {
    #[error("window needs at least {required} rows for {p} assets, got {actual}")]
    TooFewRows { required: usize, actual: usize, p: usize },

    #[error("asset index {index} out of range for {p} assets")]
    BadIndex { index: usize, p: usize },

    #[error("hedge design for asset {target} is rank deficient; dependent columns {dependent:?}")]
    Multicollinear { target: usize, dependent: Vec<usize> },

    #[error("asset {target} is perfectly hedged (residual variance {variance:e})")]
    Degenerate { target: usize, variance: f64 },

    #[error("need one regression per asset in target order")]
    IncompleteSet,

    #[error("lasso for asset {target} did not converge in {sweeps} sweeps")]
    NotConverged { target: usize, sweeps: usize },

    #[error("gamma must be finite and >= 0, got {0}")]
    InvalidGamma(f64),

    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HedgeRegression {
    pub target_index: usize,
    /// `beta_{i|j}` for every `j != i`, in ascending `j`.
    pub betas: Vec<f64>,
    pub intercept: f64,
    /// `RSS / (n - 1)`, the convention that matches the sample covariance.
    pub unhedgeable_variance: f64,
    /// `RSS / (n - p)`, the unbiased residual variance.
    pub unbiased_variance: f64,
    /// Residual variance is numerically zero relative to the target's variance.
    pub degenerate: bool,
}

impl HedgeRegression {
    /// Coefficient on asset `j` (zero for `j == target_index`).
    pub fn beta_on(&self, j: usize) -> f64 {
        use std::cmp::Ordering::*;
        match j.cmp(&self.target_index) {
            Less => self.betas[j],
            Equal => 0.0,
            Greater => self.betas[j - 1],
        }
    }

    pub fn max_abs_beta(&self) -> f64 {
        self.betas.iter().fold(0.0, |m, b| m.max(b.abs()))
    }
}

/// Centered response and design for the hedge regression of `target`.
struct Design {
    y: DVector<f64>,
    x: DMatrix<f64>,
    y_mean: f64,
    x_means: Vec<f64>,
    others: Vec<usize>,
    y_var: f64,
}

fn design(window: &DMatrix<f64>, target: usize) -> Result<Design, HedgeError> {
    let (n, p) = window.shape();
    if target >= p {
        return Err(HedgeError::BadIndex { index: target, p });
    }
    if n < 2 {
        return Err(HedgeError::TooFewRows { required: 2, actual: n, p });
    }
    let others: Vec<usize> = (0..p).filter(|&k| k != target).collect();
    let y_mean = window.column(target).mean();
    let y = window.column(target).map(|v| v - y_mean);
    let x_means: Vec<f64> = others.iter().map(|&k| window.column(k).mean()).collect();
    let x = DMatrix::from_fn(n, others.len(), |t, c| window[(t, others[c])] - x_means[c]);
    let y_var = y.norm_squared() / (n as f64 - 1.0);
    Ok(Design { y, x, y_mean, x_means, others, y_var })
}

/// Columns of `x` that are (numerically) linear combinations of earlier ones,
/// found by modified Gram-Schmidt.
fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for c in 0..x.ncols() {
        let mut v = x.column(c).into_owned();
        let norm0 = v.norm();
        for q in &basis {
            let proj = q.dot(&v);
            v.axpy(-proj, q, 1.0);
        }
        let norm = v.norm();
        if norm0 == 0.0 || norm <= 1e-10 * norm0 {
            dependent.push(c);
        } else {
            basis.push(v / norm);
        }
    }
    dependent
}

fn finish(
    d: &Design,
    target: usize,
    p: usize,
    betas: DVector<f64>,
) -> HedgeRegression {
    let n = d.y.len() as f64;
    let resid = &d.y - &d.x * &betas;
    let rss = resid.norm_squared();
    let v = rss / (n - 1.0);
    let intercept = d.y_mean - d.x_means.iter().zip(betas.iter()).map(|(m, b)| m * b).sum::<f64>();
    HedgeRegression {
        target_index: target,
        betas: betas.iter().copied().collect(),
        intercept,
        unhedgeable_variance: v,
        unbiased_variance: rss / (n - p as f64),
        degenerate: v <= 1e-12 * d.y_var,
    }
}

/// Least-squares hedge of asset `i` on an intercept and every other asset.
pub fn ols_hedge(window: &DMatrix<f64>, i: usize) -> Result<HedgeRegression, HedgeError> {
    let (n, p) = window.shape();
    if n <= p {
        return Err(HedgeError::TooFewRows { required: p + 1, actual: n, p });
    }
    let d = design(window, i)?;
    let dependent = dependent_columns(&d.x);
    if !dependent.is_empty() {
        return Err(HedgeError::Multicollinear {
            target: i,
            dependent: dependent.into_iter().map(|c| d.others[c]).collect(),
        });
    }
    let betas = d
        .x
        .clone()
        .svd(true, true)
        .solve(&d.y, 1e-14)
        .expect("full singular vectors were requested");
    Ok(finish(&d, i, p, betas))
}

/// Precision matrix assembled from one regression per asset.
#[derive(Debug, Clone, PartialEq)]
pub struct HedgeAssembly {
    /// `(A + A^T) / 2` of the raw row assembly.
    pub precision: SymmetricMatrix,
    /// `||A - A^T||_F / ||A||_F` of the raw assembly.
    pub asymmetry: f64,
}

pub fn precision_from_hedges(regressions: &[HedgeRegression]) -> Result<HedgeAssembly, HedgeError> {
    let p = regressions.len();
    if p == 0 {
        return Err(HedgeError::IncompleteSet);
    }
    let mut raw = DMatrix::zeros(p, p);
    for (i, reg) in regressions.iter().enumerate() {
        if reg.target_index != i || reg.betas.len() + 1 != p {
            return Err(HedgeError::IncompleteSet);
        }
        let v = reg.unhedgeable_variance;
        if reg.degenerate || !(v > 0.0) {
            return Err(HedgeError::Degenerate { target: i, variance: v });
        }
        for j in 0..p {
            raw[(i, j)] = if i == j { 1.0 / v } else { -reg.beta_on(j) / v };
        }
    }
    let asymmetry = (&raw - raw.transpose()).norm() / raw.norm();
    Ok(HedgeAssembly {
        precision: SymmetricMatrix::symmetrize(raw)?,
        asymmetry,
    })
}

/// `sign(b) * max(|b| - gamma, 0)`.
pub fn soft_threshold(b: f64, gamma: f64) -> f64 {
    debug_assert!(gamma >= 0.0, "threshold must be non-negative");
    if b > gamma {
        b - gamma
    } else if b < -gamma {
        b + gamma
    } else {
        0.0
    }
}

pub const LASSO_MAX_SWEEPS: usize = 100_000;

/// Lasso hedge of asset `i`:
/// `min (1/2) ||y - X beta||^2 + gamma ||beta||_1` on centered data, solved
/// by cyclic coordinate descent starting from zero.
///
/// With orthonormal regressors the solution is `soft_threshold(beta_ols, gamma)`.
pub fn lasso_hedge(window: &DMatrix<f64>, i: usize, gamma: f64) -> Result<HedgeRegression, HedgeError> {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(HedgeError::InvalidGamma(gamma));
    }
    let p = window.ncols();
    let d = design(window, i)?;
    let m = d.x.ncols();
    let col_sq: Vec<f64> = (0..m).map(|k| d.x.column(k).norm_squared()).collect();
    let tol = 1e-12 * d.y.norm().max(f64::MIN_POSITIVE);

    let mut beta = DVector::<f64>::zeros(m);
    let mut resid = d.y.clone();
    for _ in 0..LASSO_MAX_SWEEPS {
        let mut largest = 0.0f64;
        for k in 0..m {
            if col_sq[k] == 0.0 {
                continue;
            }
            let xk = d.x.column(k);
            let rho_k = xk.dot(&resid) + col_sq[k] * beta[k];
            let updated = soft_threshold(rho_k, gamma) / col_sq[k];
            let delta = updated - beta[k];
            if delta != 0.0 {
                resid.axpy(-delta, &xk, 1.0);
                beta[k] = updated;
                largest = largest.max(delta.abs() * col_sq[k].sqrt());
            }
        }
        if largest <= tol {
            return Ok(finish(&d, i, p, beta));
        }
    }
    Err(HedgeError::NotConverged { target: i, sweeps: LASSO_MAX_SWEEPS })
}

/// OLS hedges for every asset, assembled into a precision matrix.
pub fn stevens_precision(window: &DMatrix<f64>) -> Result<HedgeAssembly, HedgeError> {
    let regs = (0..window.ncols())
        .map(|i| ols_hedge(window, i))
        .collect::<Result<Vec<_>, _>>()?;
    precision_from_hedges(&regs)
}
