//! Rolling-window out-of-sample evaluation.
//!
//! For every evaluation month `t = T, ..., n - 1` a strategy estimates on
//! rows `[t - T, t)`, forms weights `w_t`, and earns `R_t = w_t' r_t` on row
//! `t`. A panel of `n` months therefore yields `n - T` out-of-sample returns.
//! Estimator failures are recorded per window and never abort the run.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::{
    self, ledoit_wolf_from_window, pca_precision, penalized_qml, tune_rho, PenaltySpec, SolverOptions, TuneResult,
    DEFAULT_SPLIT, ZERO_TOL,
};
use crate::ingest::{ReturnsPanel, YearMonth};
use crate::linalg::{self, LinalgError, SymmetricMatrix};
use crate::portfolio::{self, Weights};

pub const DEFAULT_WINDOW: usize = 120;
pub const DEFAULT_PCA_THRESHOLD: f64 = 0.99;
pub const DEFAULT_ELASTIC_ALPHA: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BacktestError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("panel has {0} missing cells; forward-fill it first")]
    Unsanitized(usize),

    #[error("window length {window} needs more than {window} months, panel has {n}")]
    PanelTooShort { window: usize, n: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("need at least {required} observations, got {actual}")]
    Insufficient { required: usize, actual: usize },

    #[error("out-of-sample variance is zero; Sharpe ratio undefined")]
    ZeroVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Sample,
    EqualWeight,
    LedoitWolf,
    Pca,
    NoShort,
    Glasso,
    Ridge,
    ElasticNet,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 8] = [
        StrategyKind::Sample,
        StrategyKind::EqualWeight,
        StrategyKind::LedoitWolf,
        StrategyKind::Pca,
        StrategyKind::NoShort,
        StrategyKind::Glasso,
        StrategyKind::Ridge,
        StrategyKind::ElasticNet,
    ];

    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::Sample => "S-MVP",
            StrategyKind::EqualWeight => "EW-MVP",
            StrategyKind::LedoitWolf => "LW-MVP",
            StrategyKind::Pca => "PCA-MVP",
            StrategyKind::NoShort => "JM-MVP",
            StrategyKind::Glasso => "Glasso-MVP",
            StrategyKind::Ridge => "Ridge-MVP",
            StrategyKind::ElasticNet => "EN-MVP",
        }
    }

    pub fn is_penalized(self) -> bool {
        matches!(self, StrategyKind::Glasso | StrategyKind::Ridge | StrategyKind::ElasticNet)
    }

    /// Strategies whose estimate carries an l1 term.
    pub fn is_sparse(self) -> bool {
        matches!(self, StrategyKind::Glasso | StrategyKind::ElasticNet)
    }

    /// Strategies that produce a full `p x p` precision estimate.
    pub fn has_precision(self) -> bool {
        matches!(
            self,
            StrategyKind::Sample
                | StrategyKind::LedoitWolf
                | StrategyKind::Glasso
                | StrategyKind::Ridge
                | StrategyKind::ElasticNet
        )
    }

    fn penalty(self, rho: f64, alpha: f64) -> Option<PenaltySpec> {
        match self {
            StrategyKind::Glasso => Some(PenaltySpec::l1(rho)),
            StrategyKind::Ridge => Some(PenaltySpec::l2(rho)),
            StrategyKind::ElasticNet => Some(PenaltySpec::elastic(rho, alpha)),
            _ => None,
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    /// Accepts table labels (`Glasso-MVP`), their prefixes (`glasso`) and
    /// the snake_case names, case-insensitively.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase();
        let key = key.strip_suffix("-mvp").unwrap_or(&key);
        let kind = match key {
            "s" | "sample" => StrategyKind::Sample,
            "ew" | "equal_weight" => StrategyKind::EqualWeight,
            "lw" | "ledoit_wolf" => StrategyKind::LedoitWolf,
            "pca" => StrategyKind::Pca,
            "jm" | "no_short" => StrategyKind::NoShort,
            "glasso" | "l1" => StrategyKind::Glasso,
            "ridge" | "l2" => StrategyKind::Ridge,
            "en" | "elastic_net" | "elastic" => StrategyKind::ElasticNet,
            _ => return Err(format!("unknown strategy '{s}'")),
        };
        Ok(kind)
    }
}

/// One strategy to evaluate. For penalized kinds, `rho = None` means "tune
/// on the first window".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl StrategySpec {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            name: None,
            rho: None,
            alpha: None,
        }
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = Some(rho);
        self
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.label().to_string())
    }

    pub fn alpha_or_default(&self) -> f64 {
        self.alpha.unwrap_or(DEFAULT_ELASTIC_ALPHA)
    }
}

/// `0, 0.1, ..., 3.0`.
pub fn default_grid() -> Vec<f64> {
    (0..=30).map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollingConfig {
    pub window_length: usize,
    pub strategies: Vec<StrategySpec>,
    pub tuning_grid: Vec<f64>,
    pub tuning_split: f64,
    pub solver: SolverOptions,
    pub pca_threshold: f64,
    /// Let JM-MVP run on singular sample covariances instead of failing.
    pub jm_allow_singular: bool,
    /// Keep every window's precision estimate in the run (memory heavy).
    pub keep_estimates: bool,
    /// Use penalized fits that exhausted the iteration budget instead of
    /// counting the window as failed.
    pub accept_unconverged: bool,
}

impl Default for RollingConfig {
    fn default() -> Self {
        Self {
            window_length: DEFAULT_WINDOW,
            strategies: StrategyKind::ALL.iter().map(|&k| StrategySpec::new(k)).collect(),
            tuning_grid: default_grid(),
            tuning_split: DEFAULT_SPLIT,
            solver: SolverOptions::default(),
            pca_threshold: DEFAULT_PCA_THRESHOLD,
            jm_allow_singular: false,
            keep_estimates: false,
            accept_unconverged: false,
        }
    }
}

impl RollingConfig {
    pub fn validate(&self, panel: &ReturnsPanel) -> Result<(), BacktestError> {
        let n = panel.n_obs();
        if self.window_length < 2 {
            return Err(BacktestError::InvalidConfig(format!(
                "window length must be at least 2, got {}",
                self.window_length
            )));
        }
        if self.window_length >= n {
            return Err(BacktestError::PanelTooShort {
                window: self.window_length,
                n,
            });
        }
        if !panel.is_sanitized() {
            return Err(BacktestError::Unsanitized(panel.unfilled_count()));
        }
        if self.strategies.is_empty() {
            return Err(BacktestError::InvalidConfig("no strategies configured".into()));
        }
        let mut labels: Vec<String> = self.strategies.iter().map(StrategySpec::label).collect();
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(BacktestError::InvalidConfig(format!(
                "duplicate strategy label '{}'",
                w[0]
            )));
        }
        for spec in &self.strategies {
            if let Some(rho) = spec.rho {
                if !(rho.is_finite() && rho >= 0.0) {
                    return Err(BacktestError::InvalidConfig(format!(
                        "{}: rho must be finite and >= 0",
                        spec.label()
                    )));
                }
            }
            if !(0.0..=1.0).contains(&spec.alpha_or_default()) {
                return Err(BacktestError::InvalidConfig(format!(
                    "{}: alpha must lie in [0, 1]",
                    spec.label()
                )));
            }
        }
        let tunes = self.strategies.iter().any(|s| s.kind.is_penalized() && s.rho.is_none());
        if tunes && (self.tuning_grid.is_empty() || self.tuning_grid.windows(2).any(|w| !(w[0] < w[1]))) {
            return Err(BacktestError::InvalidConfig(
                "tuning grid must be non-empty and strictly ascending".into(),
            ));
        }
        if !(self.pca_threshold > 0.0 && self.pca_threshold <= 1.0) {
            return Err(BacktestError::InvalidConfig("PCA threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub final_residual: f64,
    pub objective_value: f64,
}

/// A window whose strategy produced weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowFit {
    /// Row index of the evaluation month.
    pub window: usize,
    pub weights: Weights,
    pub oos_return: f64,
    /// Condition number of the precision estimate; `inf` when singular.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub condition_number: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverDiagnostics>,
    /// PCA only: `sum w` before renormalization to one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_weight_sum: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowFailure {
    pub window: usize,
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub condition_number: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyRun {
    pub label: String,
    pub spec: StrategySpec,
    /// Penalty intensity used in every window.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tuning: Option<TuneResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub setup_error: Option<String>,
    pub fits: Vec<WindowFit>,
    pub failures: Vec<WindowFailure>,
    #[serde(skip)]
    pub estimates: Option<Vec<SymmetricMatrix>>,
}

impl StrategyRun {
    pub fn oos_returns(&self) -> Vec<f64> {
        self.fits.iter().map(|f| f.oos_return).collect()
    }

    pub fn weights(&self) -> impl Iterator<Item = &Weights> {
        self.fits.iter().map(|f| &f.weights)
    }

    pub fn total_windows(&self) -> usize {
        self.fits.len() + self.failures.len()
    }

    /// The "{-}" of a results table: no window produced weights.
    pub fn is_available(&self) -> bool {
        !self.fits.is_empty()
    }

    pub fn fit_for(&self, window: usize) -> Option<&WindowFit> {
        self.fits
            .binary_search_by_key(&window, |f| f.window)
            .ok()
            .map(|k| &self.fits[k])
    }
}

struct Evaluated {
    weights: Weights,
    condition_number: Option<f64>,
    sparsity: Option<f64>,
    solver: Option<SolverDiagnostics>,
    raw_weight_sum: Option<f64>,
    estimate: Option<SymmetricMatrix>,
}

struct Failed {
    error: String,
    condition_number: Option<f64>,
}

impl<E: fmt::Display> From<E> for Failed {
    fn from(e: E) -> Self {
        Failed {
            error: e.to_string(),
            condition_number: None,
        }
    }
}

struct Context<'a> {
    config: &'a RollingConfig,
    kind: StrategyKind,
    penalty: Option<PenaltySpec>,
}

impl Context<'_> {
    fn evaluate(&self, window: &DMatrix<f64>) -> Result<Evaluated, Failed> {
        let p = window.ncols();
        let plain = |weights| Evaluated {
            weights,
            condition_number: None,
            sparsity: None,
            solver: None,
            raw_weight_sum: None,
            estimate: None,
        };
        match self.kind {
            StrategyKind::EqualWeight => Ok(plain(portfolio::equal_weights(p)?)),
            StrategyKind::Sample => {
                let s = linalg::sample_covariance(window)?;
                let eig = linalg::sym_eigen(&s);
                let cond = eig.condition_number()?;
                let psi = linalg::invert_from_eigen(&eig).map_err(|e| Failed {
                    error: e.to_string(),
                    condition_number: Some(cond),
                })?;
                self.with_precision(psi, Some(cond), None)
            }
            StrategyKind::LedoitWolf => {
                let est = ledoit_wolf_from_window(window)?;
                self.with_precision(est.psi, None, None)
            }
            StrategyKind::Pca => {
                let pca = pca_precision(window, self.config.pca_threshold)?;
                let total: f64 = pca.reduced_precision.iter().sum();
                let reduced = DVector::from_iterator(pca.k, pca.reduced_precision.iter().map(|d| d / total));
                let full = &pca.components * reduced;
                let raw = full.sum();
                if !(raw.abs() > 1e-12 * full.norm()) {
                    return Err(Failed::from(format!(
                        "back-projected PCA weights sum to {raw:e}; cannot normalize"
                    )));
                }
                log::debug!("PCA window: k = {}, raw weight sum {raw}", pca.k);
                let mut out = plain(Weights((full / raw).iter().copied().collect()));
                out.raw_weight_sum = Some(raw);
                Ok(out)
            }
            StrategyKind::NoShort => {
                let s = linalg::sample_covariance(window)?;
                if !self.config.jm_allow_singular {
                    let cond = linalg::condition_number(&s)?;
                    if cond.is_infinite() {
                        let eig = linalg::sym_eigen(&s);
                        return Err(Failed {
                            error: LinalgError::Singular {
                                lambda_min: eig.lambda_min(),
                                lambda_max: eig.lambda_max(),
                            }
                            .to_string(),
                            condition_number: Some(cond),
                        });
                    }
                }
                Ok(plain(portfolio::no_short_mvp(&s)?.weights))
            }
            StrategyKind::Glasso | StrategyKind::Ridge | StrategyKind::ElasticNet => {
                let penalty = self.penalty.expect("penalized strategies carry a penalty");
                let s = linalg::sample_covariance(window)?;
                let est = penalized_qml(&s, window.nrows(), penalty, &self.config.solver)?;
                let diag = SolverDiagnostics {
                    iterations: est.iterations,
                    converged: est.converged,
                    final_residual: est.final_residual,
                    objective_value: est.objective_value,
                };
                if !est.converged && !self.config.accept_unconverged {
                    return Err(Failed::from(format!(
                        "solver did not converge after {} iterations (residual {:e})",
                        est.iterations, est.final_residual
                    )));
                }
                let sparsity = self.kind.is_sparse().then(|| est.sparsity());
                self.with_precision(est.psi, None, Some(diag)).map(|mut e| {
                    e.sparsity = sparsity;
                    e
                })
            }
        }
    }

    fn with_precision(
        &self,
        psi: SymmetricMatrix,
        cond: Option<f64>,
        solver: Option<SolverDiagnostics>,
    ) -> Result<Evaluated, Failed> {
        let weights = portfolio::mvp_weights(&psi)?;
        let cond = match cond {
            Some(c) => c,
            None => linalg::condition_number(&psi)?,
        };
        Ok(Evaluated {
            weights,
            condition_number: Some(cond),
            sparsity: None,
            solver,
            raw_weight_sum: None,
            estimate: self.config.keep_estimates.then_some(psi),
        })
    }
}

/// Evaluates every configured strategy over all `n - T` windows. Strategies
/// come back in configuration order; the result is bit-identical for equal
/// inputs regardless of thread count.
pub fn run_rolling(panel: &ReturnsPanel, config: &RollingConfig) -> Result<Vec<StrategyRun>, BacktestError> {
    config.validate(panel)?;
    Ok(config
        .strategies
        .iter()
        .map(|spec| run_strategy(panel, config, spec))
        .collect())
}

fn run_strategy(panel: &ReturnsPanel, config: &RollingConfig, spec: &StrategySpec) -> StrategyRun {
    let t_len = config.window_length;
    let n = panel.n_obs();
    let label = spec.label();
    let mut run = StrategyRun {
        label: label.clone(),
        spec: spec.clone(),
        rho: None,
        tuning: None,
        setup_error: None,
        fits: Vec::new(),
        failures: Vec::new(),
        estimates: None,
    };

    let alpha = spec.alpha_or_default();
    let mut penalty = None;
    if spec.kind.is_penalized() {
        let rho = match spec.rho {
            Some(rho) => Ok(rho),
            None => {
                let template = spec.kind.penalty(0.0, alpha).expect("penalized");
                tune_rho(
                    &panel.rows(0, t_len),
                    template,
                    &config.tuning_grid,
                    config.tuning_split,
                    &config.solver,
                )
                .map(|tuned| {
                    let rho = tuned.rho_star;
                    log::info!("{label}: tuned rho = {rho}");
                    run.tuning = Some(tuned);
                    rho
                })
            }
        };
        match rho {
            Ok(rho) => {
                run.rho = Some(rho);
                penalty = spec.kind.penalty(rho, alpha);
            }
            Err(e) => {
                let msg = format!("rho tuning failed: {e}");
                log::warn!("{label}: {msg}; strategy unavailable");
                run.failures = (t_len..n)
                    .map(|window| WindowFailure {
                        window,
                        error: msg.clone(),
                        condition_number: None,
                    })
                    .collect();
                run.setup_error = Some(msg);
                return run;
            }
        }
    }

    let ctx = Context {
        config,
        kind: spec.kind,
        penalty,
    };
    let outcomes: Vec<(usize, Result<Evaluated, Failed>)> = (t_len..n)
        .into_par_iter()
        .map(|t| (t, ctx.evaluate(&panel.rows(t - t_len, t))))
        .collect();

    let mut estimates = config.keep_estimates.then(Vec::new);
    for (t, outcome) in outcomes {
        match outcome {
            Ok(ev) => {
                let next = panel.returns.row(t);
                let oos_return = ev.weights.dot(next.iter().copied().collect::<Vec<_>>().as_slice());
                if let (Some(list), Some(psi)) = (estimates.as_mut(), ev.estimate) {
                    list.push(psi);
                }
                run.fits.push(WindowFit {
                    window: t,
                    weights: ev.weights,
                    oos_return,
                    condition_number: ev.condition_number,
                    sparsity: ev.sparsity,
                    solver: ev.solver,
                    raw_weight_sum: ev.raw_weight_sum,
                });
            }
            Err(f) => run.failures.push(WindowFailure {
                window: t,
                error: f.error,
                condition_number: f.condition_number,
            }),
        }
    }
    run.estimates = estimates;
    if run.fits.is_empty() {
        log::warn!("{label}: every window failed; strategy unavailable");
    } else if !run.failures.is_empty() {
        log::warn!("{label}: {} of {} windows failed", run.failures.len(), run.total_windows());
    }
    run
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_variance(x: &[f64]) -> Result<f64, MetricError> {
    if x.len() < 2 {
        return Err(MetricError::Insufficient {
            required: 2,
            actual: x.len(),
        });
    }
    let m = mean(x);
    Ok(x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64)
}

pub fn oos_mean(run: &StrategyRun) -> Result<f64, MetricError> {
    if run.fits.is_empty() {
        return Err(MetricError::Insufficient { required: 1, actual: 0 });
    }
    Ok(mean(&run.oos_returns()))
}

/// Unbiased variance of the out-of-sample returns.
pub fn oos_variance(run: &StrategyRun) -> Result<f64, MetricError> {
    sample_variance(&run.oos_returns())
}

/// Mean over standard deviation of the out-of-sample returns (risk-free
/// rate zero).
pub fn oos_sharpe(run: &StrategyRun) -> Result<f64, MetricError> {
    let r = run.oos_returns();
    let var = sample_variance(&r)?;
    let scale = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if var <= (1e-14 * scale).powi(2) {
        return Err(MetricError::ZeroVariance);
    }
    Ok(mean(&r) / var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TurnoverConvention {
    /// Compare the new target with the holdings after one month of drift,
    /// `w_i (1 + r_i/100) / (1 + R/100)`.
    #[default]
    Drift,
    /// Compare consecutive target weights directly.
    Literal,
}

impl fmt::Display for TurnoverConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TurnoverConvention::Drift => "drift",
            TurnoverConvention::Literal => "literal",
        })
    }
}

impl FromStr for TurnoverConvention {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "drift" | "rebalance-to-target" => Ok(TurnoverConvention::Drift),
            "literal" => Ok(TurnoverConvention::Literal),
            _ => Err(format!("unknown turnover convention '{s}' (drift | literal)")),
        }
    }
}

/// Average total absolute trade per rebalance, over pairs of consecutive
/// successful windows.
pub fn turnover(run: &StrategyRun, panel: &ReturnsPanel, convention: TurnoverConvention) -> Result<f64, MetricError> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for pair in run.fits.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        if next.window != prev.window + 1 {
            continue;
        }
        let gross = 1.0 + prev.oos_return / 100.0;
        total += prev
            .weights
            .as_slice()
            .iter()
            .zip(next.weights.as_slice())
            .enumerate()
            .map(|(i, (&w, &target))| {
                let held = match convention {
                    TurnoverConvention::Literal => w,
                    TurnoverConvention::Drift => w * (1.0 + panel.returns[(prev.window, i)] / 100.0) / gross,
                };
                (target - held).abs()
            })
            .sum::<f64>();
        pairs += 1;
    }
    if pairs == 0 {
        return Err(MetricError::Insufficient {
            required: 2,
            actual: run.fits.len(),
        });
    }
    Ok(total / pairs as f64)
}

/// Per-window weight summary averaged across windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub min: f64,
    pub p5: f64,
    pub p95: f64,
    pub max: f64,
    pub neg_fraction: f64,
}

/// Percentile of sorted data with linear interpolation between order
/// statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn weight_distribution(run: &StrategyRun) -> Result<WeightSummary, MetricError> {
    if run.fits.is_empty() {
        return Err(MetricError::Insufficient { required: 1, actual: 0 });
    }
    let mut acc = [0.0; 5];
    for w in run.weights() {
        let mut v = w.as_slice().to_vec();
        v.sort_by(f64::total_cmp);
        let neg = v.iter().filter(|&&x| x < 0.0).count() as f64 / v.len() as f64;
        let row = [v[0], percentile(&v, 0.05), percentile(&v, 0.95), v[v.len() - 1], neg];
        for (a, x) in acc.iter_mut().zip(row) {
            *a += x;
        }
    }
    let m = run.fits.len() as f64;
    Ok(WeightSummary {
        min: acc[0] / m,
        p5: acc[1] / m,
        p95: acc[2] / m,
        max: acc[3] / m,
        neg_fraction: acc[4] / m,
    })
}

/// Average share of zero off-diagonal entries (`|psi_ij| < 1e-8`); `None`
/// when no window recorded one.
pub fn sparsity(run: &StrategyRun) -> Option<f64> {
    let values: Vec<f64> = run.fits.iter().filter_map(|f| f.sparsity).collect();
    (!values.is_empty()).then(|| mean(&values))
}

/// Share of zero off-diagonal entries of each estimate, averaged.
pub fn sparsity_of(estimates: &[SymmetricMatrix]) -> Option<f64> {
    let values: Vec<f64> = estimates
        .iter()
        .map(|psi| estimators::off_diagonal_sparsity(psi, ZERO_TOL))
        .collect();
    (!values.is_empty()).then(|| mean(&values))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionStats {
    /// `None` when fewer than one finite value was recorded.
    pub mean: Option<f64>,
    /// Sample standard deviation; `None` below two finite values.
    pub std: Option<f64>,
    pub count: usize,
    /// Windows whose estimate was singular (infinite condition number).
    pub excluded: usize,
}

pub fn condition_stats(run: &StrategyRun) -> ConditionStats {
    let all = run
        .fits
        .iter()
        .filter_map(|f| f.condition_number)
        .chain(run.failures.iter().filter_map(|f| f.condition_number));
    let (finite, infinite): (Vec<f64>, Vec<f64>) = all.partition(|c| c.is_finite());
    ConditionStats {
        mean: (!finite.is_empty()).then(|| mean(&finite)),
        std: sample_variance(&finite).ok().map(f64::sqrt),
        count: finite.len(),
        excluded: infinite.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub fits: usize,
    pub unconverged: usize,
    pub mean_iterations: f64,
    pub max_iterations: usize,
    pub max_residual: f64,
}

fn solver_summary(run: &StrategyRun) -> Option<SolverSummary> {
    let diags: Vec<&SolverDiagnostics> = run.fits.iter().filter_map(|f| f.solver.as_ref()).collect();
    if diags.is_empty() {
        return None;
    }
    Some(SolverSummary {
        fits: diags.len(),
        unconverged: diags.iter().filter(|d| !d.converged).count(),
        mean_iterations: diags.iter().map(|d| d.iterations as f64).sum::<f64>() / diags.len() as f64,
        max_iterations: diags.iter().map(|d| d.iterations).max().unwrap_or(0),
        max_residual: diags.iter().map(|d| d.final_residual).fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub label: String,
    pub kind: StrategyKind,
    pub available: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub windows_total: usize,
    pub windows_ok: usize,
    pub windows_failed: usize,
    pub oos_mean: Option<f64>,
    pub oos_variance: Option<f64>,
    pub sharpe: Option<f64>,
    pub turnover: Option<f64>,
    pub condition: Option<ConditionStats>,
    pub weights: Option<WeightSummary>,
    pub sparsity: Option<f64>,
    pub solver: Option<SolverSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_error: Option<String>,
}

pub fn summarize(run: &StrategyRun, panel: &ReturnsPanel, convention: TurnoverConvention) -> StrategySummary {
    let kind = run.spec.kind;
    StrategySummary {
        label: run.label.clone(),
        kind,
        available: run.is_available(),
        rho: run.rho,
        alpha: (kind == StrategyKind::ElasticNet).then(|| run.spec.alpha_or_default()),
        windows_total: run.total_windows(),
        windows_ok: run.fits.len(),
        windows_failed: run.failures.len(),
        oos_mean: oos_mean(run).ok(),
        oos_variance: oos_variance(run).ok(),
        sharpe: oos_sharpe(run).ok(),
        turnover: turnover(run, panel, convention).ok(),
        condition: kind.has_precision().then(|| condition_stats(run)),
        weights: weight_distribution(run).ok(),
        sparsity: sparsity(run),
        solver: solver_summary(run),
        first_error: run
            .setup_error
            .clone()
            .or_else(|| run.failures.first().map(|f| f.error.clone())),
    }
}

/// Everything a backtest of one dataset produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BacktestReport {
    pub dataset: String,
    pub n_obs: usize,
    pub n_assets: usize,
    pub window_length: usize,
    pub first_evaluation: YearMonth,
    pub last_evaluation: YearMonth,
    pub turnover_convention: TurnoverConvention,
    pub strategies: Vec<StrategySummary>,
    pub runs: Vec<StrategyRun>,
}

impl BacktestReport {
    pub fn new(
        dataset: &str,
        panel: &ReturnsPanel,
        config: &RollingConfig,
        runs: Vec<StrategyRun>,
        convention: TurnoverConvention,
    ) -> Self {
        let strategies = runs.iter().map(|r| summarize(r, panel, convention)).collect();
        Self {
            dataset: dataset.to_string(),
            n_obs: panel.n_obs(),
            n_assets: panel.n_assets(),
            window_length: config.window_length,
            first_evaluation: panel.dates[config.window_length],
            last_evaluation: panel.dates[panel.n_obs() - 1],
            turnover_convention: convention,
            strategies,
            runs,
        }
    }

    pub fn summary(&self, label: &str) -> Option<&StrategySummary> {
        self.strategies.iter().find(|s| s.label == label)
    }

    pub fn run(&self, label: &str) -> Option<&StrategyRun> {
        self.runs.iter().find(|r| r.label == label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::FactorModel;

    fn run_from(returns: &[f64], weights: &[Vec<f64>]) -> StrategyRun {
        StrategyRun {
            label: "test".into(),
            spec: StrategySpec::new(StrategyKind::EqualWeight),
            rho: None,
            tuning: None,
            setup_error: None,
            fits: returns
                .iter()
                .zip(weights)
                .enumerate()
                .map(|(k, (&r, w))| WindowFit {
                    window: k,
                    weights: Weights(w.clone()),
                    oos_return: r,
                    condition_number: None,
                    sparsity: None,
                    solver: None,
                    raw_weight_sum: None,
                })
                .collect(),
            failures: Vec::new(),
            estimates: None,
        }
    }

    fn flat(returns: &[f64]) -> StrategyRun {
        run_from(returns, &vec![vec![0.5, 0.5]; returns.len()])
    }

    fn config(window: usize, kinds: &[StrategyKind]) -> RollingConfig {
        RollingConfig {
            window_length: window,
            strategies: kinds.iter().map(|&k| StrategySpec::new(k)).collect(),
            ..RollingConfig::default()
        }
    }

    #[test]
    fn variance_and_sharpe_by_hand() {
        assert_eq!(oos_variance(&flat(&[1.0, -1.0])).unwrap(), 2.0);
        assert_eq!(oos_variance(&flat(&[3.0, 3.0, 3.0])).unwrap(), 0.0);
        assert!(matches!(oos_variance(&flat(&[1.0])), Err(MetricError::Insufficient { .. })));
        let sr = oos_sharpe(&flat(&[2.0, 0.0])).unwrap();
        assert!((sr - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(oos_sharpe(&flat(&[1.0, 1.0, 1.0])), Err(MetricError::ZeroVariance));
    }

    #[test]
    fn percentiles_interpolate_linearly() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 5.0);
        assert!((percentile(&v, 0.05) - 1.2).abs() < 1e-15);
        assert!((percentile(&v, 0.95) - 4.8).abs() < 1e-15);
    }

    #[test]
    fn weight_distribution_hand_oracle() {
        let weights = vec![
            vec![0.5, 0.3, 0.2],
            vec![-0.2, 0.6, 0.6],
            vec![1.2, -0.1, -0.1],
        ];
        let run = run_from(&[0.0, 0.0, 0.0], &weights);
        let got = weight_distribution(&run).unwrap();
        // per-window (min, p5, p95, max, neg) with h = 2q:
        // [0.2, 0.21, 0.48, 0.5, 0], [-0.2, -0.12, 0.6, 0.6, 1/3], [-0.1, -0.1, 1.07, 1.2, 2/3]
        let expect = [
            (0.2 - 0.2 - 0.1) / 3.0,
            (0.21 - 0.12 - 0.1) / 3.0,
            (0.48 + 0.6 + 1.07) / 3.0,
            (0.5 + 0.6 + 1.2) / 3.0,
            1.0 / 3.0,
        ];
        let got = [got.min, got.p5, got.p95, got.max, got.neg_fraction];
        for (g, e) in got.iter().zip(expect) {
            assert!((g - e).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn condition_stats_exclude_singular_windows() {
        let mut run = flat(&[0.0, 0.0, 0.0]);
        for (f, c) in run.fits.iter_mut().zip([1.0, 1.0, 1.0]) {
            f.condition_number = Some(c);
        }
        let stats = condition_stats(&run);
        assert_eq!((stats.mean, stats.std, stats.excluded), (Some(1.0), Some(0.0), 0));
        run.failures.push(WindowFailure {
            window: 3,
            error: "singular".into(),
            condition_number: Some(f64::INFINITY),
        });
        run.fits[2].condition_number = Some(4.0);
        let stats = condition_stats(&run);
        assert_eq!(stats.count, 3);
        assert_eq!(stats.excluded, 1);
        assert_eq!(stats.mean, Some(2.0));
        assert!(stats.std.unwrap().is_finite());
    }

    #[test]
    fn sparsity_closed_forms() {
        assert_eq!(sparsity_of(&[SymmetricMatrix::identity(4)]), Some(1.0));
        let dense = SymmetricMatrix::symmetrize(DMatrix::from_element(3, 3, 0.5) + DMatrix::identity(3, 3)).unwrap();
        assert_eq!(sparsity_of(&[dense]), Some(0.0));
    }

    #[test]
    fn one_window_when_n_is_t_plus_one() {
        let panel = FactorModel::industry_like(4, 1).panel(31, 2);
        let runs = run_rolling(&panel, &config(30, &[StrategyKind::Sample, StrategyKind::EqualWeight])).unwrap();
        for run in &runs {
            assert_eq!(run.fits.len(), 1);
            assert_eq!(run.fits[0].window, 30);
        }
    }

    #[test]
    fn equal_weight_earns_the_cross_sectional_mean() {
        let panel = FactorModel::industry_like(5, 3).panel(60, 4);
        let runs = run_rolling(&panel, &config(40, &[StrategyKind::EqualWeight])).unwrap();
        let run = &runs[0];
        assert_eq!(run.fits.len(), 20);
        for fit in &run.fits {
            let expect = panel.returns.row(fit.window).mean();
            assert!((fit.oos_return - expect).abs() < 1e-12);
        }
        assert_eq!(turnover(run, &panel, TurnoverConvention::Literal).unwrap(), 0.0);
        assert!(turnover(run, &panel, TurnoverConvention::Drift).unwrap() > 0.0);
        let w = weight_distribution(run).unwrap();
        assert!((w.min - 0.2).abs() < 1e-15 && (w.max - 0.2).abs() < 1e-15);
        assert!((w.p5 - 0.2).abs() < 1e-15 && (w.p95 - 0.2).abs() < 1e-15);
        assert_eq!(w.neg_fraction, 0.0);
    }

    #[test]
    fn single_asset_turnover_is_zero() {
        let run = run_from(&[1.0, -2.0, 3.0], &vec![vec![1.0]; 3]);
        let panel = ReturnsPanel::new(
            (0..3).map(|k| YearMonth::new(2000, 1 + k).unwrap()).collect(),
            vec!["A".into(), "B".into()],
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, -2.0, 0.0, 3.0, 0.0]),
        )
        .unwrap();
        for conv in [TurnoverConvention::Drift, TurnoverConvention::Literal] {
            assert!(turnover(&run, &panel, conv).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn drift_turnover_hand_oracle() {
        // weights (0.5, 0.5) twice; month returns (10, -10) give R = 0 and
        // drifted holdings (0.55, 0.45): turnover 0.1
        let run = run_from(&[0.0, 0.0], &vec![vec![0.5, 0.5]; 2]);
        let panel = ReturnsPanel::new(
            vec![YearMonth::new(2000, 1).unwrap(), YearMonth::new(2000, 2).unwrap()],
            vec!["A".into(), "B".into()],
            DMatrix::from_row_slice(2, 2, &[10.0, -10.0, 0.0, 0.0]),
        )
        .unwrap();
        assert!((turnover(&run, &panel, TurnoverConvention::Drift).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn no_short_weights_are_nonnegative() {
        let panel = FactorModel::industry_like(6, 5).panel(70, 6);
        let runs = run_rolling(&panel, &config(50, &[StrategyKind::NoShort])).unwrap();
        assert_eq!(weight_distribution(&runs[0]).unwrap().neg_fraction, 0.0);
    }

    #[test]
    fn singular_windows_make_sample_and_jm_unavailable() {
        let panel = FactorModel::industry_like(12, 7).panel(20, 8);
        let runs = run_rolling(
            &panel,
            &config(10, &[StrategyKind::Sample, StrategyKind::NoShort, StrategyKind::LedoitWolf]),
        )
        .unwrap();
        assert!(!runs[0].is_available() && !runs[1].is_available());
        assert!(runs[2].is_available());
        let stats = condition_stats(&runs[0]);
        assert_eq!(stats.excluded, 10);
        assert_eq!(stats.mean, None);
        for run in &runs {
            assert_eq!(run.total_windows(), 10);
        }
    }

    #[test]
    fn shrinkage_lowers_mean_condition_number() {
        let panel = FactorModel::industry_like(17, 9).panel(180, 10);
        let runs = run_rolling(&panel, &config(120, &[StrategyKind::Sample, StrategyKind::LedoitWolf])).unwrap();
        let s = condition_stats(&runs[0]).mean.unwrap();
        let lw = condition_stats(&runs[1]).mean.unwrap();
        assert!(lw <= s, "LW {lw} vs S {s}");
    }

    #[test]
    fn pca_weights_sum_to_one() {
        let panel = FactorModel::industry_like(8, 11).panel(80, 12);
        let runs = run_rolling(&panel, &config(60, &[StrategyKind::Pca])).unwrap();
        for fit in &runs[0].fits {
            assert!((fit.weights.sum() - 1.0).abs() < 1e-12);
            assert!(fit.raw_weight_sum.is_some());
        }
    }

    #[test]
    fn penalized_strategy_tunes_once_and_records_diagnostics() {
        let panel = FactorModel::industry_like(6, 13).panel(70, 14);
        let mut cfg = config(60, &[StrategyKind::Glasso]);
        cfg.tuning_grid = vec![0.0, 0.5, 1.0];
        let runs = run_rolling(&panel, &cfg).unwrap();
        let run = &runs[0];
        assert_eq!(run.tuning.as_ref().unwrap().curve.len(), 3);
        assert_eq!(run.rho, Some(run.tuning.as_ref().unwrap().rho_star));
        assert_eq!(run.fits.len(), 10);
        assert!(run.fits.iter().all(|f| f.solver.as_ref().unwrap().converged));
        assert!(sparsity(run).is_some());
    }

    #[test]
    fn config_validation() {
        let panel = FactorModel::industry_like(3, 1).panel(20, 1);
        assert!(run_rolling(&panel, &config(20, &[StrategyKind::Sample])).is_err());
        assert!(run_rolling(&panel, &config(1, &[StrategyKind::Sample])).is_err());
        assert!(run_rolling(&panel, &config(10, &[])).is_err());
        assert!(run_rolling(&panel, &config(10, &[StrategyKind::Sample, StrategyKind::Sample])).is_err());
    }

    #[test]
    fn strategy_names_parse() {
        for kind in StrategyKind::ALL {
            assert_eq!(kind.label().parse::<StrategyKind>().unwrap(), kind);
        }
        assert_eq!("glasso".parse::<StrategyKind>().unwrap(), StrategyKind::Glasso);
        assert!("nope".parse::<StrategyKind>().is_err());
    }
}
