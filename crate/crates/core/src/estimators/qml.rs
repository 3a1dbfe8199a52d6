//! Penalized Gaussian quasi-maximum likelihood.
//!
//! Maximizes
//!
//! ```text
//! (T/2) log det Psi - (T/2) tr(S Psi) - rho * P(Psi)
//! P(Psi) = (1 - a) sum_{i != j} |psi_ij| + a sum_{i != j} psi_ij^2
//! ```
//!
//! All solvers work on the objective divided by `T/2`, i.e. with effective
//! penalty `lambda = 2 rho / T`. The diagonal is never penalized.
//!
//! The default solver is an orthant-wise Newton method. Off-diagonal entries
//! at zero whose gradient lies inside the l1 band stay fixed; on the rest the
//! objective is smooth within the current sign orthant. The Newton system
//! `W D W + 2 lambda a D = -g` is solved by conjugate gradients preconditioned
//! with `D -> Psi D Psi`, corrected by a Woodbury term for the fixed entries,
//! so the curvature of `log det` costs nothing however ill-conditioned `S`
//! is. A damped step that crosses zero pins those entries and re-solves.
//! The start is the spectral solution of the ridge problem with the diagonal
//! penalized too (exact for `rho = 0`), refined for l1 terms by the smooth
//! problem whose ridge weight matches the l1 slope.
//!
//! The coordinate-descent solver sweeps the columns of `Psi`. With the other
//! columns fixed, the optimal Schur complement of column `j` is `1/s_jj` and
//! the off-diagonal part `theta` solves
//!
//! ```text
//! min  s_12' theta + (1/2) theta' (s_jj A + 2 lambda a I) theta + lambda (1 - a) |theta|_1
//! ```
//!
//! with `A` the inverse of the other block, read off the running
//! `W = Psi^{-1}`. Each inner coordinate step lowers this subproblem, so the
//! outer objective never decreases.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{
    EstimatorError, EstimatorKind, PenaltySpec, PrecisionEstimate, SolverAlgorithm, SolverOptions,
};
use crate::linalg::{self, SymmetricMatrix};

const MAX_INNER_SWEEPS: usize = 10_000;
const MAX_BACKTRACKS: usize = 60;
const NEWTON_BACKTRACKS: usize = 20;
const MAX_CG: usize = 250;
const MAX_PIN_ROUNDS: usize = 8;
const MAX_WOODBURY: usize = 2000;
const CHOLESKY_BLOCK: usize = 64;
const DAMPING_CUTOFF: f64 = 0.5;
const RIDGE_START_TOL: f64 = 1e-2;
const RIDGE_START_STEPS: usize = 50;
const ARMIJO: f64 = 1e-3;
// tolerated dip of the reported objective per accepted step
const OBJECTIVE_SLACK: f64 = 5e-11;
// relative size below which a predicted decrease is lost in f
const ROUNDING: f64 = 1e-13;

fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone())
}

fn log_det(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `log det Psi - tr(S Psi)`, or `-inf` when `Psi` is not positive definite.
pub fn gaussian_loglik(psi: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
    match cholesky(psi) {
        Some(ch) => log_det(&ch) - trace_product(s, psi),
        None => f64::NEG_INFINITY,
    }
}

/// Off-diagonal penalty `P(Psi)` without the `rho` factor.
pub fn penalty_value(psi: &DMatrix<f64>, penalty: &PenaltySpec) -> f64 {
    let a = penalty.l2_share();
    let p = psi.nrows();
    let (mut l1, mut l2) = (0.0, 0.0);
    for j in 0..p {
        for i in 0..p {
            if i != j {
                let v = psi[(i, j)];
                l1 += v.abs();
                l2 += v * v;
            }
        }
    }
    (1.0 - a) * l1 + a * l2
}

/// The objective exactly as written, including the `T/2` factors.
pub fn penalized_objective(
    psi: &DMatrix<f64>,
    s: &DMatrix<f64>,
    t: f64,
    penalty: &PenaltySpec,
) -> f64 {
    0.5 * t * gaussian_loglik(psi, s) - penalty.rho * penalty_value(psi, penalty)
}

/// Largest violation of the first-order conditions of the normalized
/// objective, given `w = psi^{-1}`. For l1 terms the distance of the smooth
/// gradient to the scaled subdifferential is used.
pub fn optimality_residual(
    psi: &DMatrix<f64>,
    w: &DMatrix<f64>,
    s: &DMatrix<f64>,
    lambda: f64,
    l2_share: f64,
) -> f64 {
    let p = psi.nrows();
    let l1w = lambda * (1.0 - l2_share);
    let l2w = lambda * l2_share;
    let mut worst = 0.0f64;
    for j in 0..p {
        for i in 0..p {
            let g = w[(i, j)] - s[(i, j)];
            let r = if i == j {
                g.abs()
            } else {
                let v = psi[(i, j)];
                let g = g - 2.0 * l2w * v;
                if v != 0.0 {
                    (g - l1w * v.signum()).abs()
                } else {
                    (g.abs() - l1w).max(0.0)
                }
            };
            worst = worst.max(r);
        }
    }
    worst
}

struct Problem<'a> {
    s: &'a DMatrix<f64>,
    t: f64,
    penalty: PenaltySpec,
    lambda: f64,
    l2_share: f64,
}

impl Problem<'_> {
    fn objective(&self, psi: &DMatrix<f64>) -> f64 {
        penalized_objective(psi, self.s, self.t, &self.penalty)
    }

    fn residual(&self, psi: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
        optimality_residual(psi, w, self.s, self.lambda, self.l2_share)
    }
}

fn inverse_of(psi: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = cholesky(psi)?.inverse();
    let t = inv.transpose();
    Some((inv + t) * 0.5)
}

/// Estimates `Psi` under the given penalty. `t` is the number of
/// observations behind `s`.
///
/// An exhausted iteration budget is not an error: the best iterate comes
/// back with `converged = false`.
pub fn penalized_qml(
    s: &SymmetricMatrix,
    t: usize,
    penalty: PenaltySpec,
    opts: &SolverOptions,
) -> Result<PrecisionEstimate, EstimatorError> {
    penalty.validate()?;
    if t < 2 {
        return Err(EstimatorError::InvalidParameter(format!(
            "sample count must be at least 2, got {t}"
        )));
    }
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(EstimatorError::InvalidParameter(
            "solver needs tol > 0 and max_iter > 0".into(),
        ));
    }
    let diag = s.diagonal();
    if let Some(i) = diag.iter().position(|&d| d <= 0.0) {
        return Err(EstimatorError::Degenerate(format!(
            "sample variance of asset {i} is not positive"
        )));
    }
    let eig = linalg::sym_eigen(s);
    eig.condition_number()?;
    if penalty.rho == 0.0 && eig.lambda_min() <= eig.singular_cutoff() {
        return Err(linalg::LinalgError::Singular {
            lambda_min: eig.lambda_min(),
            lambda_max: eig.lambda_max(),
        }
        .into());
    }

    let tf = t as f64;
    let problem = Problem {
        s: s.as_matrix(),
        t: tf,
        penalty,
        lambda: 2.0 * penalty.rho / tf,
        l2_share: penalty.l2_share(),
    };
    let init: Vec<f64> = diag.iter().map(|&d| 1.0 / (d + penalty.rho / tf)).collect();
    let psi0 = DMatrix::from_diagonal(&DVector::from_vec(init));

    let outcome = match opts.algorithm {
        SolverAlgorithm::CoordinateDescent => coordinate_ascent(&problem, psi0, opts),
        SolverAlgorithm::ProximalGradient => proximal_ascent(&problem, psi0, opts),
        SolverAlgorithm::Newton => newton_ascent(&problem, psi0, opts),
    }?;

    let psi = SymmetricMatrix::symmetrize(outcome.psi)?;
    Ok(PrecisionEstimate {
        objective_value: problem.objective(psi.as_matrix()),
        psi,
        estimator_kind: EstimatorKind::PenalizedQml,
        penalty: Some(penalty),
        shrinkage: None,
        objective_trace: outcome.trace,
        final_residual: outcome.residual,
        iterations: outcome.iterations,
        converged: outcome.converged,
    })
}

struct Outcome {
    psi: DMatrix<f64>,
    trace: Vec<f64>,
    residual: f64,
    iterations: usize,
    converged: bool,
}

fn coordinate_ascent(
    problem: &Problem<'_>,
    mut psi: DMatrix<f64>,
    opts: &SolverOptions,
) -> Result<Outcome, EstimatorError> {
    let s = problem.s;
    let p = s.nrows();
    let l1w = problem.lambda * (1.0 - problem.l2_share);
    let ridge = 2.0 * problem.lambda * problem.l2_share;
    let inner_tol = opts.tol * 1e-2;

    let mut w = inverse_of(&psi).expect("diagonal start is positive definite");
    let mut trace = vec![problem.objective(&psi)];
    let mut residual = problem.residual(&psi, &w);
    if residual <= opts.tol {
        return Ok(Outcome {
            psi,
            trace,
            residual,
            iterations: 0,
            converged: true,
        });
    }

    let m = p - 1;
    let mut others = Vec::with_capacity(m);
    let mut a = DMatrix::<f64>::zeros(m, m);
    let mut theta = DVector::<f64>::zeros(m);
    let mut s12 = DVector::<f64>::zeros(m);
    let mut grad = DVector::<f64>::zeros(m);

    for sweep in 1..=opts.max_iter {
        for j in 0..p {
            others.clear();
            others.extend((0..p).filter(|&k| k != j));
            let wjj = w[(j, j)];
            for (c, &kc) in others.iter().enumerate() {
                let wc = w[(kc, j)];
                for (r, &kr) in others.iter().enumerate() {
                    a[(r, c)] = w[(kr, kc)] - w[(kr, j)] * wc / wjj;
                }
                theta[c] = psi[(kc, j)];
                s12[c] = s[(kc, j)];
            }
            let sjj = s[(j, j)];

            // grad = M theta with M = s_jj A + ridge I
            grad.gemv(sjj, &a, &theta, 0.0);
            grad.axpy(ridge, &theta, 1.0);
            for _ in 0..MAX_INNER_SWEEPS {
                let mut largest = 0.0f64;
                for k in 0..m {
                    let mkk = sjj * a[(k, k)] + ridge;
                    let partial = s12[k] + grad[k] - mkk * theta[k];
                    let updated = -soft(partial, l1w) / mkk;
                    let delta = updated - theta[k];
                    if delta != 0.0 {
                        theta[k] = updated;
                        grad.axpy(sjj * delta, &a.column(k), 1.0);
                        grad[k] += ridge * delta;
                        largest = largest.max(delta.abs() * mkk);
                    }
                }
                if largest <= inner_tol {
                    break;
                }
            }

            let a_theta = &a * &theta;
            let quad = theta.dot(&a_theta);
            for (r, &kr) in others.iter().enumerate() {
                psi[(kr, j)] = theta[r];
                psi[(j, kr)] = theta[r];
            }
            psi[(j, j)] = 1.0 / sjj + quad;

            w[(j, j)] = sjj;
            for (c, &kc) in others.iter().enumerate() {
                let v = -sjj * a_theta[c];
                w[(kc, j)] = v;
                w[(j, kc)] = v;
                for (r, &kr) in others.iter().enumerate() {
                    w[(kr, kc)] = a[(r, c)] + sjj * a_theta[r] * a_theta[c];
                }
            }
        }

        w = inverse_of(&psi).ok_or_else(|| EstimatorError::Breakdown {
            iterations: sweep,
            reason: "iterate lost positive definiteness".into(),
        })?;
        trace.push(problem.objective(&psi));
        residual = problem.residual(&psi, &w);
        if residual <= opts.tol {
            return Ok(Outcome {
                psi,
                trace,
                residual,
                iterations: sweep,
                converged: true,
            });
        }
    }
    Ok(Outcome {
        psi,
        trace,
        residual,
        iterations: opts.max_iter,
        converged: false,
    })
}

fn newton_ascent(
    problem: &Problem<'_>,
    mut psi: DMatrix<f64>,
    opts: &SolverOptions,
) -> Result<Outcome, EstimatorError> {
    let s = problem.s;
    let p = s.nrows();
    let l1w = problem.lambda * (1.0 - problem.l2_share);
    let l2w = problem.lambda * problem.l2_share;
    let pen = |x: &DMatrix<f64>| -> f64 {
        let mut acc = 0.0;
        for j in 0..p {
            for i in 0..p {
                if i != j {
                    let v = x[(i, j)];
                    acc += l1w * v.abs() + l2w * v * v;
                }
            }
        }
        acc
    };
    let loss = |x: &DMatrix<f64>| -> Option<f64> {
        let ch = cholesky(x)?;
        Some(-log_det(&ch) + trace_product(s, x) + pen(x))
    };
    let ridge = |x: &DMatrix<f64>| -> DMatrix<f64> {
        let mut out = x * (2.0 * l2w);
        out.fill_diagonal(0.0);
        out
    };

    let mut f = loss(&psi).expect("diagonal start is positive definite");
    let mut trace = vec![problem.objective(&psi)];
    let mut ridge_curvature = DMatrix::from_element(p, p, 2.0 * l2w);
    ridge_curvature.fill_diagonal(0.0);
    // Opening move: jump to the spectral solution of the problem with the
    // diagonal penalized too, refined along a smoothed path when an l1 term
    // is present, whenever that improves on the start.
    if let Some(mut guess) = spectral_guess(s, l1w, l2w) {
        if l1w > 0.0 {
            guess = ridge_start(problem, l1w, l2w, guess);
        }
        if let Some(f_guess) = loss(&guess) {
            if f_guess < f {
                psi = guess;
                f = f_guess;
                trace.push(problem.objective(&psi));
            }
        }
    }
    let mut w = inverse_of(&psi).expect("iterate is positive definite");
    let mut residual = problem.residual(&psi, &w);
    let noise = OBJECTIVE_SLACK / (problem.t / 2.0);
    let mut mask = DMatrix::<f64>::zeros(p, p);
    let mut orthant = DMatrix::<f64>::zeros(p, p);

    for iter in 1..=opts.max_iter {
        if residual <= opts.tol {
            return Ok(Outcome {
                psi,
                trace,
                residual,
                iterations: iter - 1,
                converged: true,
            });
        }
        // minimized form: smooth gradient, then the l1 pseudo-gradient
        let grad = s - &w + ridge(&psi);
        let mut pg = grad.clone();
        for j in 0..p {
            for i in 0..p {
                let (m, o) = if i == j {
                    (1.0, 0.0)
                } else {
                    let v = psi[(i, j)];
                    let g = grad[(i, j)];
                    if v != 0.0 {
                        pg[(i, j)] = g + l1w * v.signum();
                        (1.0, v.signum())
                    } else if g > l1w {
                        pg[(i, j)] = g - l1w;
                        (1.0, -1.0)
                    } else if g < -l1w {
                        pg[(i, j)] = g + l1w;
                        (1.0, 1.0)
                    } else {
                        pg[(i, j)] = 0.0;
                        (0.0, 0.0)
                    }
                };
                mask[(i, j)] = m;
                orthant[(i, j)] = o;
            }
        }

        // Newton direction on the free entries. Entries that the damped step
        // would push through zero are pinned there and the reduced system is
        // solved again.
        let mut free = mask.clone();
        let mut pinned = DMatrix::<f64>::zeros(p, p);
        let mut directions: Vec<(DMatrix<f64>, f64)> = Vec::with_capacity(3);
        let mut reach = 1.0;
        let fixed: Vec<(usize, usize)> = (0..p)
            .flat_map(|j| (0..j).map(move |i| (i, j)))
            .filter(|&(i, j)| free[(i, j)] == 0.0)
            .collect();
        let mut precond = Preconditioner::new(&psi, fixed);
        for round in 0..MAX_PIN_ROUNDS {
            let rhs = (-&pg - &w * &pinned * &w - ridge(&pinned)).component_mul(&free);
            let dir = newton_cg(&w, &ridge_curvature, &free, &precond, rhs) + &pinned;
            if round == 0 {
                // damped Newton step length from the Newton decrement
                let decrement = (-pg.dot(&dir)).max(0.0).sqrt();
                reach = 1.0 / (1.0 + decrement);
                if reach > DAMPING_CUTOFF {
                    reach = 1.0;
                }
            }
            let mut crossed = false;
            let mut extra = Vec::new();
            if l1w > 0.0 {
                for j in 0..p {
                    for i in 0..p {
                        if i != j
                            && free[(i, j)] != 0.0
                            && (psi[(i, j)] + reach * dir[(i, j)]) * orthant[(i, j)] < 0.0
                        {
                            free[(i, j)] = 0.0;
                            pinned[(i, j)] = -psi[(i, j)] / reach;
                            crossed = true;
                            if i < j {
                                extra.push((i, j));
                            }
                        }
                    }
                }
            }
            if round == 0 || !crossed {
                directions.push((dir, reach));
            }
            if !crossed {
                break;
            }
            precond.extend(extra);
        }
        directions.reverse();
        directions.push((-&pg, 1.0));

        let project = |x: &mut DMatrix<f64>| {
            if l1w == 0.0 {
                return;
            }
            for j in 0..p {
                for i in 0..p {
                    if i != j && x[(i, j)] * orthant[(i, j)] <= 0.0 {
                        x[(i, j)] = 0.0;
                    }
                }
            }
        };
        // Once the predicted decrease is below the rounding of f, the
        // residual decides whether the full step is taken.
        let mut accepted = None;
        let newton = (&directions[0].0 + directions[0].0.transpose()) * 0.5;
        if pg.dot(&newton).abs() <= ROUNDING * (1.0 + f.abs()) {
            let mut cand = &psi + &newton;
            project(&mut cand);
            if let (Some(f_cand), Some(cw)) = (loss(&cand), inverse_of(&cand)) {
                if f_cand <= f + noise && problem.residual(&cand, &cw) < residual {
                    accepted = Some((cand, f_cand));
                }
            }
        }
        'search: for (k, (dir, start)) in directions.iter().enumerate() {
            if accepted.is_some() {
                break;
            }
            let dir = (dir + dir.transpose()) * 0.5;
            if !(pg.dot(&dir) < 0.0) {
                continue;
            }
            let budget = if k + 1 == directions.len() { MAX_BACKTRACKS } else { NEWTON_BACKTRACKS };
            let mut step = *start;
            for _ in 0..budget {
                let mut cand = &psi + &dir * step;
                project(&mut cand);
                if let Some(f_cand) = loss(&cand) {
                    let model = pg.dot(&(&cand - &psi));
                    if model < 0.0 && f_cand <= f + ARMIJO * model && f_cand < f {
                        accepted = Some((cand, f_cand));
                        break 'search;
                    }
                }
                step *= 0.5;
            }
        }
        let Some((cand, f_cand)) = accepted else {
            return Ok(Outcome {
                psi,
                trace,
                residual,
                iterations: iter,
                converged: false,
            });
        };
        psi = cand;
        f = f_cand;
        w = inverse_of(&psi).ok_or_else(|| EstimatorError::Breakdown {
            iterations: iter,
            reason: "iterate lost positive definiteness".into(),
        })?;
        trace.push(problem.objective(&psi));
        residual = problem.residual(&psi, &w);
    }
    Ok(Outcome {
        converged: residual <= opts.tol,
        psi,
        trace,
        residual,
        iterations: opts.max_iter,
    })
}

/// Lower Cholesky factor by column blocks, so most of the work is in
/// matrix products.
fn blocked_cholesky(mut a: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let n = a.nrows();
    let mut start = 0;
    while start < n {
        let nb = CHOLESKY_BLOCK.min(n - start);
        let rest = n - start - nb;
        if start > 0 {
            let done = a.view((start, 0), (n - start, start)).clone_owned();
            let row = done.rows(0, nb).transpose();
            let update = &done * row;
            let mut panel = a.view_mut((start, start), (n - start, nb));
            panel -= update;
        }
        let diag = Cholesky::new(a.view((start, start), (nb, nb)).clone_owned())?.unpack();
        if rest > 0 {
            let below = a.view((start + nb, start), (rest, nb)).transpose();
            let solved = diag.solve_lower_triangular(&below)?.transpose();
            a.view_mut((start + nb, start), (rest, nb)).copy_from(&solved);
        }
        a.view_mut((start, start), (nb, nb)).copy_from(&diag);
        start += nb;
    }
    a.fill_upper_triangle(0.0, 1);
    Some(Cholesky::pack_dirty(a))
}

/// Inverse of `X -> W X W` on symmetric matrices whose entries on the pair
/// set `C` are pinned at zero: `X -> Psi X Psi` corrected on `C` by Woodbury.
struct Preconditioner<'a> {
    psi: &'a DMatrix<f64>,
    pairs: Vec<(usize, usize)>,
    factor: Option<Cholesky<f64, Dyn>>,
    plain: bool,
}

impl<'a> Preconditioner<'a> {
    fn new(psi: &'a DMatrix<f64>, pairs: Vec<(usize, usize)>) -> Self {
        let mut out = Self {
            psi,
            pairs: Vec::new(),
            factor: None,
            plain: false,
        };
        out.extend(pairs);
        out
    }

    /// `<B_a, Psi B_b Psi>` with `B_ij = E_ij + E_ji`.
    fn gram(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        let ((i, j), (k, l)) = (a, b);
        2.0 * (self.psi[(i, k)] * self.psi[(j, l)] + self.psi[(i, l)] * self.psi[(j, k)])
    }

    /// Adds pinned pairs, appending a block to the existing factor.
    fn extend(&mut self, extra: Vec<(usize, usize)>) {
        let m = self.pairs.len();
        let k = extra.len();
        if k == 0 || self.plain {
            return;
        }
        if m + k > MAX_WOODBURY {
            self.fall_back();
            return;
        }
        let corner = DMatrix::from_fn(k, k, |a, b| self.gram(extra[a], extra[b]));
        let factor = match self.factor.take() {
            None => blocked_cholesky(corner),
            Some(old) => {
                let l = old.unpack();
                let cross = DMatrix::from_fn(m, k, |a, b| self.gram(self.pairs[a], extra[b]));
                let y = l.solve_lower_triangular(&cross).expect("factor has a positive diagonal");
                let schur = corner - y.transpose() * &y;
                blocked_cholesky(schur).map(|tail| {
                    let mut full = DMatrix::<f64>::zeros(m + k, m + k);
                    full.view_mut((0, 0), (m, m)).copy_from(&l);
                    full.view_mut((m, 0), (k, m)).copy_from(&y.transpose());
                    full.view_mut((m, m), (k, k)).copy_from(&tail.unpack());
                    Cholesky::pack_dirty(full)
                })
            }
        };
        match factor {
            Some(f) => {
                self.pairs.extend(extra);
                self.factor = Some(f);
            }
            None => self.fall_back(),
        }
    }

    fn fall_back(&mut self) {
        self.pairs.clear();
        self.factor = None;
        self.plain = true;
    }

    fn apply(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self.psi * r * self.psi;
        let Some(factor) = &self.factor else {
            return y;
        };
        let v = DVector::from_iterator(self.pairs.len(), self.pairs.iter().map(|&(i, j)| 2.0 * y[(i, j)]));
        let z = factor.solve(&v);
        let mut u = DMatrix::<f64>::zeros(y.nrows(), y.ncols());
        for (&(i, j), &zv) in self.pairs.iter().zip(z.iter()) {
            u[(i, j)] = zv;
            u[(j, i)] = zv;
        }
        y - self.psi * u * self.psi
    }
}

/// Preconditioned CG for `mask(W X W + curvature .* X) = rhs` over the
/// masked entries.
fn newton_cg(
    w: &DMatrix<f64>,
    curvature: &DMatrix<f64>,
    mask: &DMatrix<f64>,
    precond: &Preconditioner<'_>,
    rhs: DMatrix<f64>,
) -> DMatrix<f64> {
    let p = w.nrows();
    let apply = |x: &DMatrix<f64>| -> DMatrix<f64> {
        let mut out = w * x * w;
        out += x.component_mul(curvature);
        out.component_mul_assign(mask);
        out
    };
    let norm = rhs.norm();
    let forcing = 0.1f64.min(norm.sqrt()) * norm;
    let mut x = DMatrix::<f64>::zeros(p, p);
    let mut r = rhs;
    let mut z = precond.apply(&r).component_mul(mask);
    let mut search = z.clone();
    let mut rz = r.dot(&z);
    for _ in 0..MAX_CG {
        if r.norm() <= forcing {
            break;
        }
        let hs = apply(&search);
        let curv = search.dot(&hs);
        if !(curv > 0.0) {
            break;
        }
        let step = rz / curv;
        x += &search * step;
        r -= &hs * step;
        z = precond.apply(&r).component_mul(mask);
        let rz_next = r.dot(&z);
        search = &z + &search * (rz_next / rz);
        rz = rz_next;
    }
    x
}

/// Solution of the smooth problem whose ridge weight matches the l1 slope
/// at the typical off-diagonal magnitude of `guess`.
fn ridge_start(problem: &Problem<'_>, l1w: f64, l2w: f64, guess: DMatrix<f64>) -> DMatrix<f64> {
    let p = guess.nrows();
    let mut total = 0.0;
    for j in 0..p {
        for i in 0..p {
            if i != j {
                total += guess[(i, j)].abs();
            }
        }
    }
    let typical = total / (p * (p - 1)) as f64;
    if !(typical > 0.0) {
        return guess;
    }
    let lambda = l2w + l1w / (2.0 * typical);
    let smooth = Problem {
        s: problem.s,
        t: problem.t,
        penalty: PenaltySpec::l2(lambda * problem.t / 2.0),
        lambda,
        l2_share: 1.0,
    };
    let opts = SolverOptions {
        tol: RIDGE_START_TOL * l1w,
        max_iter: RIDGE_START_STEPS,
        algorithm: SolverAlgorithm::Newton,
    };
    match newton_ascent(&smooth, guess.clone(), &opts) {
        Ok(out) => out.psi,
        Err(_) => guess,
    }
}

/// Minimizer of `-log det X + tr(S X) + l2 |X|_F^2` with the l1 weight
/// folded into a diagonal loading; exact for the unpenalized problem.
fn spectral_guess(s: &DMatrix<f64>, l1w: f64, l2w: f64) -> Option<DMatrix<f64>> {
    let eig = nalgebra::SymmetricEigen::new(s.clone());
    let values = eig.eigenvalues.map(|m| {
        let m = m + l1w;
        if l2w > 0.0 {
            // positive root of 2 l2 x^2 + m x - 1 = 0, written stably
            2.0 / (m + (m * m + 8.0 * l2w).sqrt())
        } else {
            1.0 / m
        }
    });
    if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return None;
    }
    let u = &eig.eigenvectors;
    let x = u * DMatrix::from_diagonal(&values) * u.transpose();
    Some((&x + x.transpose()) * 0.5)
}

fn soft(x: f64, gamma: f64) -> f64 {
    x.signum() * (x.abs() - gamma).max(0.0)
}

fn proximal_ascent(
    problem: &Problem<'_>,
    mut psi: DMatrix<f64>,
    opts: &SolverOptions,
) -> Result<Outcome, EstimatorError> {
    let s = problem.s;
    let p = s.nrows();
    let l1w = problem.lambda * (1.0 - problem.l2_share);
    let l2w = problem.lambda * problem.l2_share;

    // smooth part of the normalized objective
    let smooth = |x: &DMatrix<f64>| -> f64 {
        let ll = gaussian_loglik(x, s);
        let mut sq = 0.0;
        for j in 0..p {
            for i in 0..p {
                if i != j {
                    sq += x[(i, j)] * x[(i, j)];
                }
            }
        }
        ll - l2w * sq
    };

    let mut w = inverse_of(&psi).expect("diagonal start is positive definite");
    let mut trace = vec![problem.objective(&psi)];
    let mut residual = problem.residual(&psi, &w);
    let mut step = 1.0 / w.diagonal().max().powi(2).max(1e-300);
    let mut h = smooth(&psi);

    for iter in 1..=opts.max_iter {
        if residual <= opts.tol {
            return Ok(Outcome {
                psi,
                trace,
                residual,
                iterations: iter - 1,
                converged: true,
            });
        }
        let mut grad = &w - s;
        for j in 0..p {
            for i in 0..p {
                if i != j {
                    grad[(i, j)] -= 2.0 * l2w * psi[(i, j)];
                }
            }
        }

        let mut accepted = None;
        step *= 2.0;
        for _ in 0..MAX_BACKTRACKS {
            let mut cand = &psi + &grad * step;
            for j in 0..p {
                for i in 0..p {
                    if i != j {
                        cand[(i, j)] = soft(cand[(i, j)], step * l1w);
                    }
                }
            }
            let cand = (&cand + cand.transpose()) * 0.5;
            let h_cand = smooth(&cand);
            if h_cand.is_finite() {
                let d = &cand - &psi;
                let bound = h + trace_product(&grad, &d) - d.norm_squared() / (2.0 * step);
                if h_cand >= bound {
                    accepted = Some((cand, h_cand));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, h_cand)) = accepted else {
            return Err(EstimatorError::Breakdown {
                iterations: iter,
                reason: "line search found no admissible step".into(),
            });
        };
        psi = cand;
        h = h_cand;
        w = inverse_of(&psi).ok_or_else(|| EstimatorError::Breakdown {
            iterations: iter,
            reason: "iterate lost positive definiteness".into(),
        })?;
        trace.push(problem.objective(&psi));
        residual = problem.residual(&psi, &w);
    }
    Ok(Outcome {
        converged: residual <= opts.tol,
        psi,
        trace,
        residual,
        iterations: opts.max_iter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{sample_precision, PenaltyKind};
    use crate::linalg::{relative_frobenius, sample_covariance};
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cov(n: usize, p: usize, seed: u64) -> SymmetricMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mix = DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { rng.random_range(-0.4..0.4) });
        let z = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.7..1.7));
        sample_covariance(&(z * mix)).unwrap()
    }

    #[test]
    fn blocked_cholesky_matches_the_plain_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in [1, 63, 64, 65, 200] {
            let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let a = &g * g.transpose() + DMatrix::identity(n, n) * n as f64;
            let blocked = blocked_cholesky(a.clone()).unwrap().unpack();
            let plain = Cholesky::new(a).unwrap().unpack();
            assert!((blocked - plain).amax() < 1e-10, "n = {n}");
        }
        let not_pd = dmatrix![1.0, 2.0; 2.0, 1.0];
        assert!(blocked_cholesky(not_pd).is_none());
    }

    #[test]
    fn extended_preconditioner_matches_a_fresh_one() {
        let psi = random_cov(40, 12, 4).into_matrix().try_inverse().unwrap();
        let pairs: Vec<(usize, usize)> = (0..12).flat_map(|j| (0..j).map(move |i| (i, j))).filter(|&(i, j)| (i + 2 * j) % 3 == 0).collect();
        let (head, tail) = pairs.split_at(7);
        let mut grown = Preconditioner::new(&psi, head.to_vec());
        grown.extend(tail.to_vec());
        let fresh = Preconditioner::new(&psi, pairs.clone());
        let r = random_cov(30, 12, 5).into_matrix();
        let diff = grown.apply(&r) - fresh.apply(&r);
        assert!(diff.amax() < 1e-10 * fresh.apply(&r).amax());
        // pinned pairs come out zero
        let y = fresh.apply(&r);
        for &(i, j) in &pairs {
            assert!(y[(i, j)].abs() < 1e-9 * y.amax());
        }
    }

    /// Multi-resolution grid search over symmetric 2x2 matrices `[[a, b], [b, c]]`,
    /// shrinking the box around the incumbent until the spacing hits `resolution`.
    fn grid_argmax_2x2(s: &DMatrix<f64>, t: f64, pen: &PenaltySpec, resolution: f64) -> [f64; 3] {
        let inv = s.clone().try_inverse().unwrap();
        let mut center = [inv[(0, 0)], inv[(0, 1)], inv[(1, 1)]];
        let mut half = [center[0].abs() * 2.0, center[1].abs().max(center[0].abs()) * 2.0, center[2].abs() * 2.0];
        let pts = 21;
        loop {
            let mut best = (f64::NEG_INFINITY, center);
            for ia in 0..pts {
                for ib in 0..pts {
                    for ic in 0..pts {
                        let f = |k: usize, d: usize| center[d] - half[d] + 2.0 * half[d] * k as f64 / (pts - 1) as f64;
                        let (a, b, c) = (f(ia, 0), f(ib, 1), f(ic, 2));
                        if a <= 0.0 || c <= 0.0 || a * c - b * b <= 0.0 {
                            continue;
                        }
                        let psi = dmatrix![a, b; b, c];
                        let v = penalized_objective(&psi, s, t, pen);
                        if v > best.0 {
                            best = (v, [a, b, c]);
                        }
                    }
                }
            }
            center = best.1;
            let spacing = half.iter().map(|h| 2.0 * h / (pts - 1) as f64).fold(0.0, f64::max);
            if spacing <= resolution {
                return center;
            }
            for h in &mut half {
                *h *= 0.35;
            }
        }
    }

    #[test]
    fn unpenalized_optimum_is_sample_inverse() {
        let s = random_cov(80, 6, 2);
        let sample = sample_precision(&s).unwrap();
        for pen in [PenaltySpec::l1(0.0), PenaltySpec::l2(0.0), PenaltySpec::elastic(0.0, 0.5)] {
            let est = penalized_qml(&s, 80, pen, &SolverOptions::default()).unwrap();
            assert!(est.converged);
            assert!(relative_frobenius(est.psi.as_matrix(), sample.psi.as_matrix()) < 1e-5);
        }
    }

    #[test]
    fn unpenalized_singular_input_is_an_error() {
        let s = SymmetricMatrix::new(dmatrix![1.0, 1.0; 1.0, 1.0]).unwrap();
        let err = penalized_qml(&s, 10, PenaltySpec::l1(0.0), &SolverOptions::default());
        assert!(matches!(err, Err(EstimatorError::Linalg(_))));
        // positive rho makes the problem well posed
        let est = penalized_qml(&s, 10, PenaltySpec::l1(0.5), &SolverOptions::default()).unwrap();
        assert!(est.converged);
        assert!(linalg::sym_eigen(&est.psi).lambda_min() > 0.0);
    }

    #[test]
    fn large_ridge_penalty_drives_psi_to_diagonal() {
        let s = random_cov(60, 5, 4);
        let est = penalized_qml(&s, 60, PenaltySpec::l2(1e7), &SolverOptions::default()).unwrap();
        assert!(est.converged);
        for i in 0..5 {
            // scalar stationarity (T/2)(1/psi_ii - s_ii) = 0
            let target = 1.0 / s.get(i, i);
            assert!((est.psi.get(i, i) - target).abs() < 1e-4 * target);
            for j in 0..5 {
                if i != j {
                    assert!(est.psi.get(i, j).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn matches_brute_force_grid_on_2x2() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kind in [PenaltyKind::L1, PenaltyKind::L2] {
            for _ in 0..3 {
                let s = random_cov(40, 2, rng.random());
                let t = 40.0;
                let rho = rng.random_range(0.05..0.6);
                let pen = match kind {
                    PenaltyKind::L1 => PenaltySpec::l1(rho),
                    _ => PenaltySpec::l2(rho),
                };
                let est = penalized_qml(&s, 40, pen, &SolverOptions::default()).unwrap();
                let [a, b, c] = grid_argmax_2x2(s.as_matrix(), t, &pen, 1e-4);
                assert!((est.psi.get(0, 0) - a).abs() < 1e-3);
                assert!((est.psi.get(0, 1) - b).abs() < 1e-3);
                assert!((est.psi.get(1, 1) - c).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn elastic_endpoints_match_pure_penalties() {
        let s = random_cov(50, 7, 6);
        let opts = SolverOptions::default();
        let l1 = penalized_qml(&s, 50, PenaltySpec::l1(0.7), &opts).unwrap();
        let e0 = penalized_qml(&s, 50, PenaltySpec::elastic(0.7, 0.0), &opts).unwrap();
        assert!(relative_frobenius(e0.psi.as_matrix(), l1.psi.as_matrix()) < 1e-5);
        let l2 = penalized_qml(&s, 50, PenaltySpec::l2(0.7), &opts).unwrap();
        let e1 = penalized_qml(&s, 50, PenaltySpec::elastic(0.7, 1.0), &opts).unwrap();
        assert!(relative_frobenius(e1.psi.as_matrix(), l2.psi.as_matrix()) < 1e-5);
    }

    #[test]
    fn objective_trace_never_decreases() {
        let s = random_cov(30, 8, 12);
        for pen in [PenaltySpec::l1(0.4), PenaltySpec::l2(0.4), PenaltySpec::elastic(0.4, 0.5)] {
            for algorithm in [
                SolverAlgorithm::Newton,
                SolverAlgorithm::CoordinateDescent,
                SolverAlgorithm::ProximalGradient,
            ] {
                let opts = SolverOptions { algorithm, ..SolverOptions::default() };
                let est = penalized_qml(&s, 30, pen, &opts).unwrap();
                for w in est.objective_trace.windows(2) {
                    assert!(w[1] >= w[0] - 1e-10 * w[0].abs().max(1.0), "{pen:?} {algorithm:?}");
                }
            }
        }
    }

    #[test]
    fn all_algorithms_reach_the_same_optimum() {
        let s = random_cov(90, 5, 21);
        for pen in [PenaltySpec::l1(1.0), PenaltySpec::l2(2.0), PenaltySpec::elastic(1.5, 0.5)] {
            let newton = penalized_qml(&s, 90, pen, &SolverOptions::default()).unwrap();
            assert!(newton.converged);
            for algorithm in [SolverAlgorithm::CoordinateDescent, SolverAlgorithm::ProximalGradient] {
                let other =
                    penalized_qml(&s, 90, pen, &SolverOptions { algorithm, ..SolverOptions::default() }).unwrap();
                assert!(other.converged, "{algorithm:?}");
                assert!(
                    relative_frobenius(other.psi.as_matrix(), newton.psi.as_matrix()) < 1e-5,
                    "{pen:?} {algorithm:?}"
                );
            }
        }
    }

    #[test]
    fn converges_quickly_on_ill_conditioned_percent_scale_data() {
        // more assets than observations, factor structure, percent units
        let window = crate::simulate::FactorModel::industry_like(40, 3).sample(30, 4);
        let s = sample_covariance(&window).unwrap();
        for pen in [PenaltySpec::l1(0.5), PenaltySpec::l2(0.5), PenaltySpec::elastic(0.5, 0.5)] {
            let est = penalized_qml(&s, 30, pen, &SolverOptions::default()).unwrap();
            assert!(est.converged && est.iterations <= 50, "{pen:?}: {} iterations", est.iterations);
            assert!(est.final_residual <= 1e-6);
            assert!(linalg::sym_eigen(&est.psi).lambda_min() > 0.0);
        }
    }

    #[test]
    fn l1_produces_exact_zeros() {
        let s = random_cov(40, 6, 31);
        let est = penalized_qml(&s, 40, PenaltySpec::l1(15.0), &SolverOptions::default()).unwrap();
        assert!(est.converged);
        assert!(est.sparsity() > 0.0);
    }

    #[test]
    fn permuting_assets_permutes_the_estimate() {
        let s = random_cov(50, 5, 17);
        let perm = [3, 0, 4, 1, 2];
        let opts = SolverOptions { tol: 1e-10, ..SolverOptions::default() };
        for pen in [PenaltySpec::l1(0.8), PenaltySpec::l2(0.8), PenaltySpec::elastic(0.8, 0.5)] {
            let a = penalized_qml(&s, 50, pen, &opts).unwrap();
            let b = penalized_qml(&s.permute(&perm), 50, pen, &opts).unwrap();
            assert!(relative_frobenius(b.psi.as_matrix(), a.psi.permute(&perm).as_matrix()) < 1e-6);
        }
    }

    #[test]
    fn budget_exhaustion_is_flagged() {
        let s = random_cov(30, 6, 5);
        let opts = SolverOptions { max_iter: 1, tol: 1e-14, ..SolverOptions::default() };
        let est = penalized_qml(&s, 30, PenaltySpec::l1(0.3), &opts).unwrap();
        assert!(!est.converged);
        assert_eq!(est.iterations, 1);
        assert!(est.final_residual > 1e-14);
    }
}
