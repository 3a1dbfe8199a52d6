use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gaussian_loglik, penalized_qml, EstimatorError, PenaltySpec, SolverOptions};
use crate::linalg;

/// Share of the in-sample block used for fitting; the rest scores the fit.
pub const DEFAULT_SPLIT: f64 = 0.75;

const MIN_ROWS: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub rho: f64,
    /// Held-out Gaussian log-likelihood; `-inf` when the fit failed.
    pub score: f64,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub rho_star: f64,
    pub curve: Vec<CurvePoint>,
    pub train_rows: usize,
    pub holdout_rows: usize,
}

impl TuneResult {
    /// True when the best score sits strictly inside the grid.
    pub fn has_interior_max(&self) -> bool {
        let best = self
            .curve
            .iter()
            .position(|c| c.rho == self.rho_star)
            .unwrap_or(0);
        best > 0 && best + 1 < self.curve.len()
    }
}

/// Picks `rho` on a train/holdout split of `in_sample`.
///
/// Every grid value is fitted on the first `ceil(split * n)` rows and scored
/// by `log det Psi - tr(S_holdout Psi)` on the remaining rows. Ties go to the
/// smaller `rho`. `penalty.rho` is ignored.
pub fn tune_rho(
    in_sample: &DMatrix<f64>,
    penalty: PenaltySpec,
    grid: &[f64],
    split: f64,
    opts: &SolverOptions,
) -> Result<TuneResult, EstimatorError> {
    let n = in_sample.nrows();
    if n < MIN_ROWS {
        return Err(linalg::LinalgError::InsufficientData {
            required: MIN_ROWS,
            actual: n,
        }
        .into());
    }
    if grid.is_empty() || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(EstimatorError::InvalidParameter(
            "tuning grid must be non-empty and strictly ascending".into(),
        ));
    }
    if !(split > 0.0 && split < 1.0) {
        return Err(EstimatorError::InvalidParameter(format!(
            "split must lie in (0, 1), got {split}"
        )));
    }
    let train_rows = ((split * n as f64).ceil() as usize).clamp(2, n - 2);
    let train = in_sample.rows(0, train_rows).into_owned();
    let holdout = in_sample.rows(train_rows, n - train_rows).into_owned();
    let s_train = linalg::sample_covariance(&train)?;
    let s_hold = linalg::sample_covariance(&holdout)?;

    let curve: Vec<CurvePoint> = grid
        .par_iter()
        .map(|&rho| match penalized_qml(&s_train, train_rows, penalty.with_rho(rho), opts) {
            Ok(est) if est.converged => CurvePoint {
                rho,
                score: gaussian_loglik(est.psi.as_matrix(), s_hold.as_matrix()),
                converged: true,
                error: None,
            },
            Ok(est) => CurvePoint {
                rho,
                score: f64::NEG_INFINITY,
                converged: false,
                error: Some(format!(
                    "not converged after {} iterations (residual {:e})",
                    est.iterations, est.final_residual
                )),
            },
            Err(e) => CurvePoint {
                rho,
                score: f64::NEG_INFINITY,
                converged: false,
                error: Some(e.to_string()),
            },
        })
        .collect();

    let mut best: Option<&CurvePoint> = None;
    for point in curve.iter().filter(|c| c.score.is_finite()) {
        if best.is_none_or(|b| point.score > b.score) {
            best = Some(point);
        }
    }
    let rho_star = best.ok_or(EstimatorError::TuningFailed)?.rho;
    Ok(TuneResult {
        rho_star,
        curve,
        train_rows,
        holdout_rows: n - train_rows,
    })
}
