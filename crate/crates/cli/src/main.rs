use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use precis::backtest::{StrategyKind, TurnoverConvention};
use precis_cli::{cmd_backtest, cmd_describe, cmd_tune, DatasetConfig, GridConfig, RunConfig, StrategyConfig};

/// Precision-matrix estimators and minimum-variance portfolio backtests.
///
/// Settings come from the TOML file given by --config; flags override it.
#[derive(Debug, Parser)]
#[command(name = "precis", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: Common,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Estimation window length in months.
    #[arg(long, global = true, value_name = "N")]
    window: Option<usize>,

    /// Turnover convention.
    #[arg(long, global = true, value_name = "drift|literal")]
    turnover: Option<TurnoverConvention>,

    /// Tuning grid for rho.
    #[arg(long, global = true, value_name = "START:STOP:STEP")]
    grid: Option<GridConfig>,

    /// Comma-separated strategies, e.g. S-MVP,EW-MVP,glasso.
    #[arg(long, global = true, value_name = "LIST", value_delimiter = ',')]
    strategies: Option<Vec<StrategyKind>>,

    /// Extra dataset as NAME=PATH; may repeat.
    #[arg(long = "dataset", global = true, value_name = "NAME=PATH")]
    datasets: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Descriptive statistics per dataset.
    Describe,
    /// Choose rho for each penalized estimator on the first window.
    Tune,
    /// Rolling out-of-sample backtest.
    Backtest,
}

fn resolve(common: Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = common.out {
        cfg.out = out;
    }
    if let Some(w) = common.window {
        cfg.window_length = w;
    }
    if let Some(t) = common.turnover {
        cfg.turnover = t;
    }
    if let Some(g) = common.grid {
        cfg.grid = g;
    }
    if let Some(kinds) = common.strategies {
        cfg.strategies = kinds
            .into_iter()
            .map(|k| {
                // keep per-strategy settings from the file when the kind is listed there
                cfg.strategies
                    .iter()
                    .find(|s| s.to_spec().is_ok_and(|spec| spec.kind == k))
                    .cloned()
                    .unwrap_or(StrategyConfig {
                        kind: k.label().to_string(),
                        name: None,
                        rho: None,
                        alpha: None,
                    })
            })
            .collect();
    }
    for raw in common.datasets {
        let (name, path) = raw
            .split_once('=')
            .with_context(|| format!("--dataset expects NAME=PATH, got '{raw}'"))?;
        cfg.datasets.push(DatasetConfig {
            name: name.to_string(),
            path: PathBuf::from(path),
            start: None,
            end: None,
        });
    }
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    if let Ok(raw) = std::env::var("PRECIS_THREADS") {
        let n: usize = raw
            .trim()
            .parse()
            .with_context(|| format!("PRECIS_THREADS must be a positive integer, got '{raw}'"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let cfg = resolve(cli.common)?;
    match cli.command {
        Command::Describe => {
            let entries = cmd_describe(&cfg)?;
            for e in &entries {
                println!("{}: n = {}, p = {}, p/n = {:.3}", e.dataset, e.stats.n, e.stats.p, e.stats.dim_ratio);
            }
        }
        Command::Tune => {
            for e in cmd_tune(&cfg)? {
                match &e.result {
                    Some(r) => println!("{} / {}: rho* = {}", e.dataset, e.strategy, r.rho_star),
                    None => println!("{} / {}: failed ({})", e.dataset, e.strategy, e.error.unwrap_or_default()),
                }
            }
        }
        Command::Backtest => {
            for report in cmd_backtest(&cfg)?.datasets {
                for s in &report.strategies {
                    match (s.available, s.oos_variance) {
                        (true, Some(v)) => println!("{} / {}: OOS variance {v:.4}", report.dataset, s.label),
                        (true, None) => println!("{} / {}: {} window(s)", report.dataset, s.label, s.windows_ok),
                        (false, _) => println!("{} / {}: unavailable", report.dataset, s.label),
                    }
                }
            }
        }
    }
    println!("wrote {}", cfg.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
