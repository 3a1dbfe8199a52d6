//! Linear shrinkage of the sample covariance toward a scaled identity.

use nalgebra::DMatrix;

use super::{EstimatorError, EstimatorKind, PrecisionEstimate};
use crate::linalg::{self, SymmetricMatrix};

/// Shrinks `s` to `(1 - alpha) S + alpha * mean(diag S) * I` and inverts it.
pub fn ledoit_wolf(s: &SymmetricMatrix, alpha: f64) -> Result<PrecisionEstimate, EstimatorError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(EstimatorError::InvalidParameter(format!(
            "shrinkage intensity must lie in [0, 1], got {alpha}"
        )));
    }
    let p = s.dim();
    let target = s.trace() / p as f64;
    if target <= 0.0 {
        return Err(EstimatorError::Degenerate(
            "average sample variance is zero".into(),
        ));
    }
    let shrunk = s.as_matrix() * (1.0 - alpha) + DMatrix::identity(p, p) * (alpha * target);
    let shrunk = SymmetricMatrix::symmetrize(shrunk)?;
    let psi = linalg::invert_spd(&shrunk)?;
    let mut est = PrecisionEstimate::closed_form(psi, EstimatorKind::LedoitWolf);
    est.shrinkage = Some(alpha);
    Ok(est)
}

/// Analytic optimal intensity for the scaled-identity target (Ledoit and
/// Wolf, 2004), computed from the demeaned observations with `1/n` moments.
///
/// ```text
/// m   = tr(S_n) / p
/// d^2 = ||S_n - m I||_F^2
/// b^2 = min(d^2, (1/n^2) sum_t ||x_t x_t' - S_n||_F^2)
/// alpha = b^2 / d^2
/// ```
pub fn ledoit_wolf_intensity(window: &DMatrix<f64>) -> Result<f64, EstimatorError> {
    let (n, p) = window.shape();
    if n < 2 || p == 0 {
        return Err(linalg::LinalgError::InsufficientData { required: 2, actual: n }.into());
    }
    let means = window.row_mean();
    let mut x = window.clone();
    for mut row in x.row_iter_mut() {
        row -= &means;
    }
    let nf = n as f64;
    let sn = x.transpose() * &x / nf;
    let m = sn.trace() / p as f64;
    let d2 = (&sn - DMatrix::identity(p, p) * m).norm_squared();
    if d2 == 0.0 {
        // already proportional to the target
        return Ok(if m > 0.0 { 1.0 } else { 0.0 });
    }
    // sum_t ||x_t x_t' - S_n||^2 = sum_t ||x_t||^4 - n ||S_n||^2
    let fourth: f64 = x.row_iter().map(|r| r.norm_squared().powi(2)).sum();
    let spread = (fourth - nf * sn.norm_squared()).max(0.0) / (nf * nf);
    Ok(spread.min(d2) / d2)
}

/// Ledoit-Wolf precision with the analytic intensity, applied to the `n - 1`
/// sample covariance of `window`.
pub fn ledoit_wolf_from_window(window: &DMatrix<f64>) -> Result<PrecisionEstimate, EstimatorError> {
    let alpha = ledoit_wolf_intensity(window)?;
    let s = linalg::sample_covariance(window)?;
    ledoit_wolf(&s, alpha)
}
