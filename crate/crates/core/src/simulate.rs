//! Synthetic return panels for tests, demos and benchmarks.
//!
//! Panels follow a one-factor model in percent units,
//! `r_t = mu + beta f_t + e_t` with Gaussian factor and idiosyncratic noise,
//! so the population covariance `beta beta' s_f^2 + diag(s_e^2)` is known.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ingest::{ReturnsPanel, YearMonth};
use crate::linalg::SymmetricMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub mean: Vec<f64>,
    pub loadings: Vec<f64>,
    pub factor_sd: f64,
    pub idio_sd: Vec<f64>,
}

impl FactorModel {
    /// Randomly drawn model that looks like monthly industry portfolios:
    /// means around 1%, market loadings near one, idiosyncratic volatility of
    /// 2-4%.
    pub fn industry_like(p: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            mean: (0..p).map(|_| rng.random_range(0.6..1.3)).collect(),
            loadings: (0..p).map(|_| rng.random_range(0.6..1.4)).collect(),
            factor_sd: 4.5,
            idio_sd: (0..p).map(|_| rng.random_range(2.0..4.0)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> SymmetricMatrix {
        let b = DVector::from_column_slice(&self.loadings);
        let mut c = &b * b.transpose() * self.factor_sd.powi(2);
        for (i, s) in self.idio_sd.iter().enumerate() {
            c[(i, i)] += s * s;
        }
        SymmetricMatrix::symmetrize(c).expect("finite model")
    }

    pub fn sample(&self, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = self.dim();
        let mut out = DMatrix::zeros(n, p);
        for t in 0..n {
            let f: f64 = StandardNormal.sample(&mut rng);
            for j in 0..p {
                let e: f64 = StandardNormal.sample(&mut rng);
                out[(t, j)] = self.mean[j] + self.loadings[j] * self.factor_sd * f + self.idio_sd[j] * e;
            }
        }
        out
    }

    /// Panel of `n` months starting July 1973 with assets `A0, A1, ...`.
    pub fn panel(&self, n: usize, seed: u64) -> ReturnsPanel {
        let returns = self.sample(n, seed);
        let mut dates = Vec::with_capacity(n);
        let mut d = YearMonth::new(1973, 7).expect("valid month");
        for _ in 0..n {
            dates.push(d);
            d = d.next();
        }
        let assets = (0..self.dim()).map(|j| format!("A{j}")).collect();
        ReturnsPanel::new(dates, assets, returns).expect("well-formed synthetic panel")
    }
}

/// Draws `n` rows from `N(0, inverse(precision))`.
pub fn gaussian_from_precision(precision: &SymmetricMatrix, n: usize, seed: u64) -> DMatrix<f64> {
    let p = precision.dim();
    let sigma = crate::linalg::invert_spd(precision).expect("precision must be positive definite");
    let l = sigma
        .as_matrix()
        .clone()
        .cholesky()
        .expect("covariance must be positive definite")
        .l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DMatrix::from_fn(n, p, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
    z * l.transpose()
}
