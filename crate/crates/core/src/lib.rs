//! Precision-matrix estimation for minimum-variance portfolios.
//!
//! The crate covers the whole evaluation pipeline for monthly return panels:
//! parsing and sanitizing ([`ingest`]), dense symmetric linear algebra
//! ([`linalg`]), precision estimators including penalized Gaussian
//! quasi-likelihood ([`estimators`]), hedge-regression oracles ([`hedge`]),
//! portfolio construction ([`portfolio`]) and rolling out-of-sample
//! backtests ([`backtest`]).
//!
//! Returns are kept in percent throughout.

pub mod backtest;
pub mod estimators;
pub mod hedge;
pub mod ingest;
pub mod linalg;
pub mod portfolio;
pub mod simulate;

pub use backtest::{
    run_rolling, BacktestReport, RollingConfig, StrategyKind, StrategyRun, StrategySpec, TurnoverConvention,
};
pub use estimators::{PenaltyKind, PenaltySpec, PrecisionEstimate, SolverOptions};
pub use ingest::{ReturnsPanel, YearMonth};
pub use linalg::SymmetricMatrix;
