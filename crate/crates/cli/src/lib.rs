//! Batch front end: descriptive statistics, penalty tuning and rolling
//! backtests over a set of return panels.
//!
//! Every output file is written to a temporary sibling and renamed into
//! place, so an interrupted run never leaves a half-written report.

pub mod config;

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use precis::backtest::{BacktestReport, RollingConfig, StrategyKind, StrategySpec, StrategySummary};
use precis::estimators::{tune_rho, CurvePoint, PenaltySpec, TuneResult, DEFAULT_SPLIT};
use precis::ingest::{describe, forward_fill, parse_panel, DescriptiveStats, ReturnsPanel};
use rayon::prelude::*;
use serde::Serialize;

pub use config::{DatasetConfig, GridConfig, RunConfig, StrategyConfig};

/// Root directory for one command's artifacts.
pub struct Output {
    root: PathBuf,
}

impl Output {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `bytes` to `root/rel` via a temporary file and a rename.
    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        let dir = path.parent().expect("joined path has a parent");
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("temp file in {}", dir.display()))?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(&path).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    pub fn write_table(&self, rel: &str, table: &Table) -> Result<PathBuf> {
        self.write(rel, &table.to_csv()?)
    }
}

/// A CSV table assembled in memory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))
    }
}

/// Empty cell for a missing value.
fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `-` for an unavailable strategy, as in the published tables.
fn table_cell(s: Option<&StrategySummary>, f: impl Fn(&StrategySummary) -> Option<f64>) -> String {
    match s {
        Some(s) if s.available => cell(f(s)),
        _ => "-".into(),
    }
}

fn file_stem(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Parses and forward-fills one configured dataset.
pub fn load_dataset(ds: &DatasetConfig) -> Result<ReturnsPanel> {
    let file = File::open(&ds.path).with_context(|| format!("dataset {}: opening {}", ds.name, ds.path.display()))?;
    let raw = parse_panel(std::io::BufReader::new(file), ds.date_range()?)
        .with_context(|| format!("dataset {}: parsing {}", ds.name, ds.path.display()))?;
    let panel = forward_fill(&raw).with_context(|| format!("dataset {}", ds.name))?;
    if raw.missing_count() > 0 {
        log::info!("{}: forward-filled {} missing cells", ds.name, raw.missing_count());
    }
    Ok(panel)
}

fn load_all(cfg: &RunConfig) -> Result<Vec<ReturnsPanel>> {
    cfg.validate()?;
    cfg.datasets.par_iter().map(load_dataset).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct DescribeEntry {
    pub dataset: String,
    pub first_month: String,
    pub last_month: String,
    #[serde(flatten)]
    pub stats: DescriptiveStats,
}

/// Writes `describe.json`, `tables/describe.csv` and one per-asset table per
/// dataset.
pub fn cmd_describe(cfg: &RunConfig) -> Result<Vec<DescribeEntry>> {
    let panels = load_all(cfg)?;
    let entries = cfg
        .datasets
        .iter()
        .zip(&panels)
        .map(|(ds, panel)| {
            let stats = describe(panel).with_context(|| format!("dataset {}", ds.name))?;
            Ok(DescribeEntry {
                dataset: ds.name.clone(),
                first_month: panel.dates[0].to_string(),
                last_month: panel.dates[panel.n_obs() - 1].to_string(),
                stats,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let out = Output::new(&cfg.out)?;
    out.write_json("describe.json", &entries)?;
    let mut summary = Table::new([
        "dataset",
        "first_month",
        "last_month",
        "n",
        "p",
        "p_over_n",
        "missing_cells",
        "max_corr",
        "mean_abs_corr",
    ]);
    for e in &entries {
        let s = &e.stats;
        summary.push(vec![
            e.dataset.clone(),
            e.first_month.clone(),
            e.last_month.clone(),
            s.n.to_string(),
            s.p.to_string(),
            s.dim_ratio.to_string(),
            s.missing_cells.to_string(),
            s.max_corr.to_string(),
            s.mean_abs_corr.to_string(),
        ]);
        let mut assets = Table::new(["asset", "mean", "variance", "sharpe"]);
        for a in &s.per_asset {
            assets.push(vec![
                a.asset.clone(),
                a.mean.to_string(),
                a.variance.to_string(),
                a.sharpe.to_string(),
            ]);
        }
        out.write_table(&format!("tables/assets_{}.csv", file_stem(&e.dataset)), &assets)?;
    }
    out.write_table("tables/describe.csv", &summary)?;
    Ok(entries)
}

#[derive(Debug, Clone, Serialize)]
pub struct TuneEntry {
    pub dataset: String,
    pub strategy: String,
    pub result: Option<TuneResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Penalized strategies named in the config, or all three when none is.
fn tunable_specs(cfg: &RunConfig) -> Result<Vec<StrategySpec>> {
    let specs: Vec<StrategySpec> = cfg
        .strategy_specs()?
        .into_iter()
        .filter(|s| s.kind.is_penalized())
        .collect();
    if specs.is_empty() {
        return Ok([StrategyKind::Glasso, StrategyKind::Ridge, StrategyKind::ElasticNet]
            .into_iter()
            .map(StrategySpec::new)
            .collect());
    }
    Ok(specs)
}

fn penalty_template(spec: &StrategySpec) -> PenaltySpec {
    match spec.kind {
        StrategyKind::Glasso => PenaltySpec::l1(0.0),
        StrategyKind::Ridge => PenaltySpec::l2(0.0),
        _ => PenaltySpec::elastic(0.0, spec.alpha_or_default()),
    }
}

fn curve_table(curve: &[CurvePoint]) -> Table {
    let mut t = Table::new(["rho", "score"]);
    for c in curve {
        t.push(vec![c.rho.to_string(), c.score.to_string()]);
    }
    t
}

/// Tunes `rho` for every penalized strategy on the first window of each
/// dataset. Writes `tune.json`, `tables/rho.csv` and `curves/*.csv`.
pub fn cmd_tune(cfg: &RunConfig) -> Result<Vec<TuneEntry>> {
    let panels = load_all(cfg)?;
    let specs = tunable_specs(cfg)?;
    let grid = cfg.grid.points()?;
    for (ds, panel) in cfg.datasets.iter().zip(&panels) {
        if panel.n_obs() < cfg.window_length {
            bail!(
                "dataset {}: {} months are fewer than the window length {}",
                ds.name,
                panel.n_obs(),
                cfg.window_length
            );
        }
    }
    let jobs: Vec<(usize, &StrategySpec)> = (0..panels.len())
        .flat_map(|d| specs.iter().map(move |s| (d, s)))
        .collect();
    let entries: Vec<TuneEntry> = jobs
        .par_iter()
        .map(|&(d, spec)| {
            let block = panels[d].rows(0, cfg.window_length);
            let outcome = tune_rho(&block, penalty_template(spec), &grid, DEFAULT_SPLIT, &cfg.solver);
            if let Err(e) = &outcome {
                log::warn!("{} / {}: {e}", cfg.datasets[d].name, spec.label());
            }
            TuneEntry {
                dataset: cfg.datasets[d].name.clone(),
                strategy: spec.label(),
                error: outcome.as_ref().err().map(|e| e.to_string()),
                result: outcome.ok(),
            }
        })
        .collect();

    let out = Output::new(&cfg.out)?;
    out.write_json("tune.json", &entries)?;
    let mut rho = Table::new(["dataset", "strategy", "rho_star", "interior_max"]);
    for e in &entries {
        rho.push(vec![
            e.dataset.clone(),
            e.strategy.clone(),
            cell(e.result.as_ref().map(|r| r.rho_star)),
            e.result.as_ref().map(|r| r.has_interior_max().to_string()).unwrap_or_default(),
        ]);
        if let Some(r) = &e.result {
            out.write_table(
                &format!("curves/{}_{}.csv", file_stem(&e.dataset), file_stem(&e.strategy)),
                &curve_table(&r.curve),
            )?;
        }
    }
    out.write_table("tables/rho.csv", &rho)?;
    Ok(entries)
}

#[derive(Debug, Clone, Serialize)]
pub struct BacktestOutput {
    pub seed: u64,
    pub window_length: usize,
    pub turnover_convention: String,
    pub datasets: Vec<BacktestReport>,
}

pub fn rolling_config(cfg: &RunConfig) -> Result<RollingConfig> {
    Ok(RollingConfig {
        window_length: cfg.window_length,
        strategies: cfg.strategy_specs()?,
        tuning_grid: cfg.grid.points()?,
        tuning_split: DEFAULT_SPLIT,
        solver: cfg.solver,
        pca_threshold: precis::backtest::DEFAULT_PCA_THRESHOLD,
        jm_allow_singular: cfg.jm_allow_singular,
        keep_estimates: false,
        accept_unconverged: cfg.accept_unconverged,
    })
}

/// Runs the rolling backtest on every dataset. Writes `report.json`,
/// `tables/*.csv` and the tuning curves under `curves/`.
pub fn cmd_backtest(cfg: &RunConfig) -> Result<BacktestOutput> {
    let panels = load_all(cfg)?;
    let rolling = rolling_config(cfg)?;
    let reports = cfg
        .datasets
        .par_iter()
        .zip(panels.par_iter())
        .map(|(ds, panel)| {
            let runs = precis::backtest::run_rolling(panel, &rolling).with_context(|| format!("dataset {}", ds.name))?;
            let report = BacktestReport::new(&ds.name, panel, &rolling, runs, cfg.turnover);
            for s in report.strategies.iter().filter(|s| !s.available) {
                log::warn!(
                    "{} / {}: unavailable ({})",
                    ds.name,
                    s.label,
                    s.first_error.as_deref().unwrap_or("no windows")
                );
            }
            Ok(report)
        })
        .collect::<Result<Vec<_>>>()?;

    let output = BacktestOutput {
        seed: cfg.seed,
        window_length: cfg.window_length,
        turnover_convention: cfg.turnover.to_string(),
        datasets: reports,
    };
    let out = Output::new(&cfg.out)?;
    out.write_json("report.json", &output)?;
    write_backtest_tables(&out, &output)?;
    Ok(output)
}

fn write_backtest_tables(out: &Output, output: &BacktestOutput) -> Result<()> {
    let reports = &output.datasets;
    let mut labels: Vec<String> = Vec::new();
    for r in reports {
        for s in &r.strategies {
            if !labels.contains(&s.label) {
                labels.push(s.label.clone());
            }
        }
    }
    let names: Vec<&str> = reports.iter().map(|r| r.dataset.as_str()).collect();

    let mut long = Table::new([
        "dataset",
        "strategy",
        "available",
        "rho",
        "windows_total",
        "windows_ok",
        "windows_failed",
        "oos_mean",
        "oos_variance",
        "sharpe",
        "turnover",
        "cond_mean",
        "cond_std",
        "cond_excluded",
        "weight_min",
        "weight_p5",
        "weight_p95",
        "weight_max",
        "weight_neg",
        "sparsity",
    ]);
    for r in reports {
        for s in &r.strategies {
            let cond = s.condition.as_ref();
            let w = s.weights.as_ref();
            long.push(vec![
                r.dataset.clone(),
                s.label.clone(),
                s.available.to_string(),
                cell(s.rho),
                s.windows_total.to_string(),
                s.windows_ok.to_string(),
                s.windows_failed.to_string(),
                cell(s.oos_mean),
                cell(s.oos_variance),
                cell(s.sharpe),
                cell(s.turnover),
                cell(cond.and_then(|c| c.mean)),
                cell(cond.and_then(|c| c.std)),
                cond.map(|c| c.excluded.to_string()).unwrap_or_default(),
                cell(w.map(|w| w.min)),
                cell(w.map(|w| w.p5)),
                cell(w.map(|w| w.p95)),
                cell(w.map(|w| w.max)),
                cell(w.map(|w| w.neg_fraction)),
                cell(s.sparsity),
            ]);
        }
    }
    out.write_table("tables/summary.csv", &long)?;

    let wide = |metric: &dyn Fn(&StrategySummary) -> Option<f64>| {
        let mut t = Table::new(std::iter::once("strategy").chain(names.iter().copied()));
        for label in &labels {
            let mut row = vec![label.clone()];
            for r in reports {
                row.push(table_cell(r.summary(label), metric));
            }
            t.push(row);
        }
        t
    };
    out.write_table("tables/variance.csv", &wide(&|s| s.oos_variance))?;
    out.write_table("tables/sharpe.csv", &wide(&|s| s.sharpe))?;
    out.write_table("tables/turnover.csv", &wide(&|s| s.turnover))?;

    let mut cond = Table::new(
        std::iter::once("strategy".to_string()).chain(names.iter().flat_map(|n| [format!("{n}_mean"), format!("{n}_std")])),
    );
    let mut sparsity = Table::new(std::iter::once("strategy").chain(names.iter().copied()));
    let mut windows = Table::new(
        std::iter::once("strategy".to_string()).chain(names.iter().flat_map(|n| [format!("{n}_ok"), format!("{n}_failed")])),
    );
    for label in &labels {
        let mut crow = vec![label.clone()];
        let mut srow = vec![label.clone()];
        let mut wrow = vec![label.clone()];
        let mut has_cond = false;
        let mut has_sparsity = false;
        for r in reports {
            let s = r.summary(label);
            match s.and_then(|s| s.condition.as_ref()) {
                Some(c) if c.mean.is_some() => {
                    has_cond = true;
                    crow.push(cell(c.mean));
                    crow.push(cell(c.std));
                }
                Some(_) => {
                    has_cond = true;
                    crow.extend(["-".to_string(), "-".to_string()]);
                }
                None => crow.extend(["-".to_string(), "-".to_string()]),
            }
            if s.is_some_and(|s| s.sparsity.is_some()) {
                has_sparsity = true;
            }
            srow.push(table_cell(s, |s| s.sparsity));
            wrow.push(s.map(|s| s.windows_ok.to_string()).unwrap_or_default());
            wrow.push(s.map(|s| s.windows_failed.to_string()).unwrap_or_default());
        }
        if has_cond {
            cond.push(crow);
        }
        if has_sparsity {
            sparsity.push(srow);
        }
        windows.push(wrow);
    }
    out.write_table("tables/condition.csv", &cond)?;
    out.write_table("tables/sparsity.csv", &sparsity)?;
    out.write_table("tables/windows.csv", &windows)?;

    let mut weights = Table::new(["dataset", "strategy", "min", "p5", "p95", "max", "neg"]);
    for r in reports {
        for s in &r.strategies {
            if let Some(w) = &s.weights {
                weights.push(vec![
                    r.dataset.clone(),
                    s.label.clone(),
                    w.min.to_string(),
                    w.p5.to_string(),
                    w.p95.to_string(),
                    w.max.to_string(),
                    w.neg_fraction.to_string(),
                ]);
            }
        }
    }
    out.write_table("tables/weights.csv", &weights)?;

    for r in reports {
        for run in &r.runs {
            if let Some(t) = &run.tuning {
                out.write_table(
                    &format!("curves/{}_{}.csv", file_stem(&r.dataset), file_stem(&run.label)),
                    &curve_table(&t.curve),
                )?;
            }
        }
    }
    Ok(())
}
