//! Precision-matrix estimators.
//!
//! - [`sample_precision`], `S^{-1}`
//! - [`ledoit_wolf`], inverse of the covariance shrunk toward `mean(diag S) * I`
//! - [`pca_precision`], inverse spectrum of the leading principal components
//! - [`penalized_qml`], Gaussian quasi-likelihood with an l1, l2 or
//!   elastic-net penalty on the off-diagonal entries of `Psi`
//! - [`tune_rho`], picks the penalty intensity on a held-out likelihood

mod ledoit_wolf;
mod pca;
mod qml;
mod tuning;

pub use ledoit_wolf::{ledoit_wolf, ledoit_wolf_from_window, ledoit_wolf_intensity};
pub use pca::{pca_precision, PcaEstimate};
pub use qml::{gaussian_loglik, penalized_objective, penalty_value, penalized_qml, optimality_residual};
pub use tuning::{tune_rho, CurvePoint, TuneResult, DEFAULT_SPLIT};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, SymmetricMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),

    #[error("invalid penalty: {0}")]
    InvalidPenalty(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical breakdown after {iterations} iterations: {reason}")]
    Breakdown { iterations: usize, reason: String },

    #[error("tuning failed: every grid point failed to converge")]
    TuningFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    L1,
    L2,
    Elastic,
}

/// Penalty applied to the off-diagonal entries of `Psi`.
///
/// `alpha` is the l2 share of the elastic net and is ignored for `L1`
/// (share 0) and `L2` (share 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    pub rho: f64,
    pub alpha: f64,
}

impl PenaltySpec {
    pub fn l1(rho: f64) -> Self {
        Self {
            kind: PenaltyKind::L1,
            rho,
            alpha: 0.0,
        }
    }

    pub fn l2(rho: f64) -> Self {
        Self {
            kind: PenaltyKind::L2,
            rho,
            alpha: 1.0,
        }
    }

    pub fn elastic(rho: f64, alpha: f64) -> Self {
        Self {
            kind: PenaltyKind::Elastic,
            rho,
            alpha,
        }
    }

    pub fn with_rho(self, rho: f64) -> Self {
        Self { rho, ..self }
    }

    /// Weight of the squared term.
    pub fn l2_share(&self) -> f64 {
        match self.kind {
            PenaltyKind::L1 => 0.0,
            PenaltyKind::L2 => 1.0,
            PenaltyKind::Elastic => self.alpha,
        }
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return Err(EstimatorError::InvalidPenalty(format!(
                "rho must be finite and >= 0, got {}",
                self.rho
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(EstimatorError::InvalidPenalty(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverAlgorithm {
    /// Column-by-column block ascent; each column is an elastic-net
    /// regression solved by cyclic coordinate descent.
    CoordinateDescent,
    /// Proximal gradient ascent with a backtracking line search that only
    /// accepts positive-definite iterates.
    ProximalGradient,
    /// Orthant-wise Newton: the direction solves the second-order model on
    /// the free entries by preconditioned conjugate gradients, and a
    /// backtracking step keeps the iterate positive definite and the
    /// objective increasing.
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Bound on the first-order optimality residual of the objective divided
    /// by `T/2`.
    pub tol: f64,
    /// Outer iterations: Newton steps, column sweeps or gradient steps.
    pub max_iter: usize,
    pub algorithm: SolverAlgorithm,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 10_000,
            algorithm: SolverAlgorithm::Newton,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Sample,
    LedoitWolf,
    Pca,
    PenalizedQml,
}

/// An estimated precision matrix with solver provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionEstimate {
    pub psi: SymmetricMatrix,
    pub estimator_kind: EstimatorKind,
    pub penalty: Option<PenaltySpec>,
    pub shrinkage: Option<f64>,
    pub objective_value: f64,
    /// Objective after each outer iteration, starting with the initial point.
    pub objective_trace: Vec<f64>,
    pub final_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl PrecisionEstimate {
    pub(crate) fn closed_form(psi: SymmetricMatrix, kind: EstimatorKind) -> Self {
        Self {
            psi,
            estimator_kind: kind,
            penalty: None,
            shrinkage: None,
            objective_value: f64::NAN,
            objective_trace: Vec::new(),
            final_residual: 0.0,
            iterations: 0,
            converged: true,
        }
    }

    /// Fraction of off-diagonal entries with `|psi_ij| < 1e-8`.
    pub fn sparsity(&self) -> f64 {
        off_diagonal_sparsity(&self.psi, ZERO_TOL)
    }
}

/// Entries below this magnitude count as zero in sparsity summaries.
pub const ZERO_TOL: f64 = 1e-8;

pub fn off_diagonal_sparsity(psi: &SymmetricMatrix, zero_tol: f64) -> f64 {
    let p = psi.dim();
    if p < 2 {
        return 0.0;
    }
    let m = psi.as_matrix();
    let mut zeros = 0usize;
    for j in 0..p {
        for i in 0..p {
            if i != j && m[(i, j)].abs() < zero_tol {
                zeros += 1;
            }
        }
    }
    zeros as f64 / (p * (p - 1)) as f64
}

pub fn sample_precision(s: &SymmetricMatrix) -> Result<PrecisionEstimate, EstimatorError> {
    let psi = linalg::invert_spd(s)?;
    Ok(PrecisionEstimate::closed_form(psi, EstimatorKind::Sample))
}
