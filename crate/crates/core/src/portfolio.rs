//! Portfolio weights from covariance or precision estimates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::SymmetricMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PortfolioError {
    #[error("portfolio needs at least one asset")]
    Empty,

    #[error("normalizer e'Psi e = {value:e} is numerically zero")]
    DegenerateNormalizer { value: f64 },

    #[error("expected returns are parallel to the unit vector (ac - b^2 = {value:e})")]
    DegenerateFrontier { value: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("no-short-sale QP did not converge in {iterations} iterations")]
    QpNotConverged { iterations: usize, best: Weights },
}

/// Portfolio weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Weights(pub Vec<f64>);

impl Weights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// `w' r`.
    pub fn dot(&self, r: &[f64]) -> f64 {
        self.0.iter().zip(r).map(|(w, x)| w * x).sum()
    }

    /// `w' A w`.
    pub fn quadratic_form(&self, a: &DMatrix<f64>) -> f64 {
        let w = DVector::from_column_slice(&self.0);
        w.dot(&(a * &w))
    }

    fn from_vector(v: DVector<f64>) -> Self {
        Self(v.iter().copied().collect())
    }
}

/// `Psi e / (e' Psi e)`.
pub fn mvp_weights(psi: &SymmetricMatrix) -> Result<Weights, PortfolioError> {
    let m = psi.as_matrix();
    let row_sums: DVector<f64> = DVector::from_iterator(m.nrows(), m.row_iter().map(|r| r.sum()));
    let total = row_sums.sum();
    let scale = m.norm();
    if !(total.abs() > 1e-12 * scale) {
        return Err(PortfolioError::DegenerateNormalizer { value: total });
    }
    Ok(Weights::from_vector(row_sums / total))
}

/// Minimum-variance weights reaching target return `r`:
/// `w = ((c - b r) Psi e + (a r - b) Psi mu) / (a c - b^2)` with
/// `a = e'Psi e`, `b = e'Psi mu`, `c = mu'Psi mu`.
pub fn mean_variance_weights(
    psi: &SymmetricMatrix,
    mu: &[f64],
    r: f64,
) -> Result<Weights, PortfolioError> {
    let p = psi.dim();
    if mu.len() != p {
        return Err(PortfolioError::DimensionMismatch {
            expected: p,
            actual: mu.len(),
        });
    }
    let m = psi.as_matrix();
    let mu = DVector::from_column_slice(mu);
    let psi_e = DVector::from_iterator(p, m.row_iter().map(|row| row.sum()));
    let psi_mu = m * &mu;
    let a = psi_e.sum();
    let b = psi_mu.sum();
    let c = mu.dot(&psi_mu);
    let det = a * c - b * b;
    if !(det.abs() > 1e-12 * (a * c).abs()) {
        return Err(PortfolioError::DegenerateFrontier { value: det });
    }
    let w = psi_e * ((c - b * r) / det) + psi_mu * ((a * r - b) / det);
    Ok(Weights::from_vector(w))
}

pub fn equal_weights(p: usize) -> Result<Weights, PortfolioError> {
    if p == 0 {
        return Err(PortfolioError::Empty);
    }
    Ok(Weights(vec![1.0 / p as f64; p]))
}

/// No-short-sale minimum-variance solution with its optimality certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub weights: Weights,
    /// Common marginal risk `(2 S w)_i` on the support.
    pub multiplier: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// KKT residual of `min w'Sw, sum w = 1, w >= 0` at `w`: with `g = 2 S w`
/// and `lambda` the mean of `g` over the support, the largest of
/// `|g_i - lambda|` (support), `max(lambda - g_i, 0)` (zeros), `max(-w_i, 0)`
/// and `|sum w - 1|`.
pub fn no_short_kkt_residual(s: &SymmetricMatrix, w: &Weights) -> (f64, f64) {
    let g = s.as_matrix() * DVector::from_column_slice(w.as_slice()) * 2.0;
    let support: Vec<usize> = (0..w.len()).filter(|&i| w.0[i] > 0.0).collect();
    let lambda = if support.is_empty() {
        0.0
    } else {
        support.iter().map(|&i| g[i]).sum::<f64>() / support.len() as f64
    };
    let mut worst = (w.sum() - 1.0).abs();
    for i in 0..w.len() {
        let r = if w.0[i] > 0.0 {
            (g[i] - lambda).abs()
        } else {
            (lambda - g[i]).max(0.0).max(-w.0[i])
        };
        worst = worst.max(r);
    }
    (worst, lambda)
}

/// Minimizer of `x' S_FF x` over `sum x = 1` for the free set `F`.
fn subspace_minimizer(s: &DMatrix<f64>, free: &[usize]) -> DVector<f64> {
    let k = free.len();
    let mut kkt = DMatrix::zeros(k + 1, k + 1);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            kkt[(a, b)] = 2.0 * s[(i, j)];
        }
        kkt[(a, k)] = 1.0;
        kkt[(k, a)] = 1.0;
    }
    let mut rhs = DVector::zeros(k + 1);
    rhs[k] = 1.0;
    let sol = match kkt.clone().lu().solve(&rhs) {
        Some(x) if x.iter().all(|v| v.is_finite()) => x,
        _ => kkt
            .svd(true, true)
            .solve(&rhs, 1e-13)
            .expect("full singular vectors were requested"),
    };
    sol.rows(0, k).into_owned()
}

/// Minimum-variance weights with `w >= 0`, by a primal active-set method
/// started from equal weights. Ties are broken toward the lowest index.
pub fn no_short_mvp(s: &SymmetricMatrix) -> Result<QpSolution, PortfolioError> {
    let p = s.dim();
    if p == 0 {
        return Err(PortfolioError::Empty);
    }
    let sm = s.as_matrix();
    let max_iter = 20 * p + 100;
    let mut w = vec![1.0 / p as f64; p];
    let mut free = vec![true; p];

    for iter in 1..=max_iter {
        let idx: Vec<usize> = (0..p).filter(|&i| free[i]).collect();
        let target = subspace_minimizer(sm, &idx);
        let dir: Vec<f64> = idx.iter().enumerate().map(|(a, &i)| target[a] - w[i]).collect();
        let step_norm = dir.iter().fold(0.0f64, |m, d| m.max(d.abs()));

        if step_norm <= 1e-15 {
            let g = sm * DVector::from_column_slice(&w) * 2.0;
            let lambda = idx.iter().map(|&i| g[i]).sum::<f64>() / idx.len() as f64;
            let tol = 1e-12 * lambda.abs().max(1.0);
            match (0..p).find(|&i| !free[i] && g[i] - lambda < -tol) {
                Some(release) => free[release] = true,
                None => return Ok(finalize(s, &free, iter)),
            }
            continue;
        }

        let mut alpha = 1.0;
        let mut blocking = None;
        for (a, &i) in idx.iter().enumerate() {
            if dir[a] < 0.0 {
                let ratio = w[i] / -dir[a];
                if ratio < alpha {
                    alpha = ratio;
                    blocking = Some(i);
                }
            }
        }
        for (a, &i) in idx.iter().enumerate() {
            w[i] += alpha * dir[a];
        }
        if let Some(b) = blocking {
            w[b] = 0.0;
            free[b] = false;
        }
    }
    Err(PortfolioError::QpNotConverged {
        iterations: max_iter,
        best: Weights(w),
    })
}

fn finalize(s: &SymmetricMatrix, free: &[bool], iterations: usize) -> QpSolution {
    let p = free.len();
    let idx: Vec<usize> = (0..p).filter(|&i| free[i]).collect();
    let x = subspace_minimizer(s.as_matrix(), &idx);
    let mut w = vec![0.0; p];
    for (a, &i) in idx.iter().enumerate() {
        w[i] = x[a].max(0.0);
    }
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    let weights = Weights(w);
    let (kkt_residual, multiplier) = no_short_kkt_residual(s, &weights);
    QpSolution {
        weights,
        multiplier,
        kkt_residual,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::invert_spd;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp1};

    fn random_spd(p: usize, rng: &mut ChaCha8Rng) -> SymmetricMatrix {
        let b = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        SymmetricMatrix::symmetrize(&b * b.transpose() + DMatrix::identity(p, p) * 0.1).unwrap()
    }

    #[test]
    fn mvp_closed_forms() {
        let w = mvp_weights(&SymmetricMatrix::identity(4)).unwrap();
        assert_eq!(w.0, vec![0.25; 4]);
        let w = mvp_weights(&SymmetricMatrix::from_diagonal(&[1.0, 3.0])).unwrap();
        assert!((w.0[0] - 0.25).abs() < 1e-15 && (w.0[1] - 0.75).abs() < 1e-15);
        let w = mvp_weights(&SymmetricMatrix::from_diagonal(&[2.5])).unwrap();
        assert_eq!(w.0, vec![1.0]);
    }

    #[test]
    fn mvp_degenerate_normalizer() {
        let psi = SymmetricMatrix::new(dmatrix![1.0, -1.0; -1.0, 1.0]).unwrap();
        assert!(matches!(mvp_weights(&psi), Err(PortfolioError::DegenerateNormalizer { .. })));
    }

    #[test]
    fn mvp_beats_random_unit_sum_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sigma = random_spd(6, &mut rng);
        let w = mvp_weights(&invert_spd(&sigma).unwrap()).unwrap();
        assert!((w.sum() - 1.0).abs() < 1e-10);
        let base = w.quadratic_form(sigma.as_matrix());
        for _ in 0..100_000 {
            let mut d: Vec<f64> = (0..6).map(|_| rng.random_range(-0.5..0.5)).collect();
            let mean = d.iter().sum::<f64>() / 6.0;
            d.iter_mut().for_each(|x| *x -= mean);
            let probe = Weights(w.0.iter().zip(&d).map(|(a, b)| a + b).collect());
            assert!(probe.quadratic_form(sigma.as_matrix()) >= base - 1e-12);
        }
    }

    #[test]
    fn mvp_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let psi = random_spd(5, &mut rng);
        let scaled = SymmetricMatrix::symmetrize(psi.as_matrix() * 7.5).unwrap();
        let a = mvp_weights(&psi).unwrap();
        let b = mvp_weights(&scaled).unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_variance_two_asset_case() {
        let w = mean_variance_weights(&SymmetricMatrix::identity(2), &[1.0, 2.0], 1.5).unwrap();
        assert!((w.0[0] - 0.5).abs() < 1e-12 && (w.0[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mean_variance_constraints_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let psi = random_spd(5, &mut rng);
            let mu: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..2.0)).collect();
            let r = rng.random_range(-1.0..3.0);
            let w = mean_variance_weights(&psi, &mu, r).unwrap();
            assert!((w.sum() - 1.0).abs() < 1e-8);
            assert!((w.dot(&mu) - r).abs() < 1e-8);
        }
    }

    #[test]
    fn mean_variance_parallel_mu_is_degenerate() {
        let psi = SymmetricMatrix::identity(3);
        assert!(matches!(
            mean_variance_weights(&psi, &[0.7, 0.7, 0.7], 0.7),
            Err(PortfolioError::DegenerateFrontier { .. })
        ));
    }

    #[test]
    fn mean_variance_at_mvp_return_is_mvp_near_the_degenerate_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let psi = random_spd(4, &mut rng);
        let mvp = mvp_weights(&psi).unwrap();
        let v = [0.3, -0.2, 0.5, 0.1];
        for eps in [1e-1, 1e-2, 1e-3] {
            let mu: Vec<f64> = v.iter().map(|x| 0.8 + eps * x).collect();
            let r = mvp.dot(&mu);
            let w = mean_variance_weights(&psi, &mu, r).unwrap();
            for (a, b) in w.0.iter().zip(&mvp.0) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn equal_weight_cases() {
        let w = equal_weights(17).unwrap();
        assert!(w.0.iter().all(|&x| x == 1.0 / 17.0));
        assert_eq!(equal_weights(1).unwrap().0, vec![1.0]);
        assert!((equal_weights(10_000).unwrap().sum() - 1.0).abs() < 1e-10);
        assert_eq!(equal_weights(0), Err(PortfolioError::Empty));
    }

    #[test]
    fn no_short_two_asset_closed_form() {
        let sol = no_short_mvp(&SymmetricMatrix::from_diagonal(&[1.0, 4.0])).unwrap();
        assert!((sol.weights.0[0] - 0.8).abs() < 1e-12);
        assert!((sol.weights.0[1] - 0.2).abs() < 1e-12);
        assert!(sol.kkt_residual <= 1e-7);
    }

    #[test]
    fn no_short_equals_unconstrained_when_inactive() {
        let s = SymmetricMatrix::new(dmatrix![2.0, 0.3, 0.1; 0.3, 1.5, 0.2; 0.1, 0.2, 1.0]).unwrap();
        let unconstrained = mvp_weights(&invert_spd(&s).unwrap()).unwrap();
        assert!(unconstrained.0.iter().all(|&w| w > 0.0));
        let sol = no_short_mvp(&s).unwrap();
        for (a, b) in sol.weights.0.iter().zip(&unconstrained.0) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn no_short_zeros_match_simplex_grid() {
        // asset 0 is cheap; asset 2 is strongly positively tied to it and riskier
        let s = SymmetricMatrix::new(dmatrix![1.0, -0.3, 1.4; -0.3, 2.0, 0.2; 1.4, 0.2, 3.0]).unwrap();
        let sol = no_short_mvp(&s).unwrap();
        assert!(sol.weights.0.contains(&0.0));
        assert!(sol.kkt_residual <= 1e-7);
        let mut best = (f64::INFINITY, [0.0; 3]);
        let steps = 1000;
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                let w = [i as f64 / steps as f64, j as f64 / steps as f64, (steps - i - j) as f64 / steps as f64];
                let v = Weights(w.to_vec()).quadratic_form(s.as_matrix());
                if v < best.0 {
                    best = (v, w);
                }
            }
        }
        for k in 0..3 {
            assert!((sol.weights.0[k] - best.1[k]).abs() <= 2e-3);
        }
        assert!(sol.weights.quadratic_form(s.as_matrix()) <= best.0 + 1e-12);
    }

    #[test]
    fn no_short_beats_simplex_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let s = random_spd(8, &mut rng);
            let sol = no_short_mvp(&s).unwrap();
            assert!(sol.kkt_residual <= 1e-7);
            let obj = sol.weights.quadratic_form(s.as_matrix());
            for _ in 0..20_000 {
                let e: Vec<f64> = (0..8).map(|_| Exp1.sample(&mut rng)).collect();
                let t: f64 = e.iter().sum();
                let probe = Weights(e.into_iter().map(|x| x / t).collect());
                assert!(probe.quadratic_form(s.as_matrix()) >= obj - 1e-12);
            }
        }
    }

    #[test]
    fn single_asset_strategies_agree() {
        let s = SymmetricMatrix::from_diagonal(&[3.0]);
        assert_eq!(no_short_mvp(&s).unwrap().weights.0, vec![1.0]);
        assert_eq!(mvp_weights(&s).unwrap().0, vec![1.0]);
        assert_eq!(equal_weights(1).unwrap().0, vec![1.0]);
    }
}
