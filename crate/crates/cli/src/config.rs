//! Run configuration: one TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use precis::backtest::{default_grid, StrategyKind, StrategySpec, TurnoverConvention, DEFAULT_WINDOW};
use precis::estimators::SolverOptions;
use precis::ingest::{DateRange, YearMonth};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub path: PathBuf,
    /// First month kept, `YYYYMM`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<i64>,
    /// Last month kept, `YYYYMM`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<i64>,
}

impl DatasetConfig {
    pub fn date_range(&self) -> Result<Option<DateRange>> {
        let month = |stamp: i64| {
            YearMonth::from_yyyymm(stamp).with_context(|| format!("dataset {}: bad month {stamp}", self.name))
        };
        match (self.start, self.end) {
            (None, None) => Ok(None),
            (start, end) => {
                let start = start.map(month).transpose()?.unwrap_or(YearMonth::new(1, 1).expect("valid"));
                let end = end.map(month).transpose()?.unwrap_or(YearMonth::new(9999, 12).expect("valid"));
                if end < start {
                    bail!("dataset {}: end month precedes start month", self.name);
                }
                Ok(Some(DateRange { start, end }))
            }
        }
    }
}

/// `rho = 0.8` or `rho = "tune"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RhoSetting {
    Fixed(f64),
    Keyword(RhoKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RhoKeyword {
    Tune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    /// Table label (`Glasso-MVP`) or short name (`glasso`).
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<RhoSetting>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl StrategyConfig {
    pub fn to_spec(&self) -> Result<StrategySpec> {
        let kind = StrategyKind::from_str(&self.kind).map_err(anyhow::Error::msg)?;
        let rho = match self.rho {
            Some(RhoSetting::Fixed(r)) => Some(r),
            Some(RhoSetting::Keyword(RhoKeyword::Tune)) | None => None,
        };
        Ok(StrategySpec {
            kind,
            name: self.name.clone(),
            rho,
            alpha: self.alpha,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            start: 0.0,
            stop: 3.0,
            step: 0.1,
        }
    }
}

impl GridConfig {
    /// `start, start + step, ...` up to `stop` inclusive; points are formed
    /// as `start + k step`, rounded to 12 decimals.
    pub fn points(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0) || !self.start.is_finite() || !self.stop.is_finite() {
            bail!("tuning grid needs finite bounds and step > 0");
        }
        if self.stop < self.start {
            bail!("tuning grid stop {} is below start {}", self.stop, self.start);
        }
        if *self == GridConfig::default() {
            return Ok(default_grid());
        }
        let count = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..count)
            .map(|k| ((self.start + k as f64 * self.step) * 1e12).round() / 1e12)
            .collect())
    }
}

impl FromStr for GridConfig {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            bail!("grid must be START:STOP:STEP, got '{s}'");
        }
        let num = |x: &str| x.trim().parse::<f64>().with_context(|| format!("bad grid number '{x}'"));
        let grid = GridConfig {
            start: num(parts[0])?,
            stop: num(parts[1])?,
            step: num(parts[2])?,
        };
        grid.points()?;
        Ok(grid)
    }
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_strategies() -> Vec<StrategyConfig> {
    StrategyKind::ALL
        .iter()
        .map(|k| StrategyConfig {
            kind: k.label().to_string(),
            name: None,
            rho: None,
            alpha: None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub datasets: Vec<DatasetConfig>,
    #[serde(default = "default_window")]
    pub window_length: usize,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StrategyConfig>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub turnover: TurnoverConvention,
    /// Echoed into reports; every computation is deterministic.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub jm_allow_singular: bool,
    #[serde(default)]
    pub accept_unconverged: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            datasets: Vec::new(),
            window_length: DEFAULT_WINDOW,
            strategies: default_strategies(),
            grid: GridConfig::default(),
            out: default_out(),
            turnover: TurnoverConvention::Drift,
            seed: 0,
            solver: SolverOptions::default(),
            jm_allow_singular: false,
            accept_unconverged: false,
        }
    }
}

impl RunConfig {
    /// Reads a TOML file; relative dataset paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for ds in &mut cfg.datasets {
            if ds.path.is_relative() {
                ds.path = base.join(&ds.path);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            bail!("no datasets configured (add [[datasets]] to the config or pass --dataset NAME=PATH)");
        }
        let mut names: Vec<&str> = self.datasets.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            bail!("duplicate dataset name '{}'", w[0]);
        }
        for ds in &self.datasets {
            if !ds.path.is_file() {
                bail!("dataset {}: file {} does not exist", ds.name, ds.path.display());
            }
            ds.date_range()?;
        }
        if self.window_length < 2 {
            bail!("window_length must be at least 2");
        }
        if self.strategies.is_empty() {
            bail!("no strategies configured");
        }
        for s in &self.strategies {
            s.to_spec()?;
        }
        self.grid.points()?;
        Ok(())
    }

    pub fn strategy_specs(&self) -> Result<Vec<StrategySpec>> {
        self.strategies.iter().map(StrategyConfig::to_spec).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_config() {
        let text = r#"
            window_length = 60
            turnover = "literal"
            out = "results"
            [grid]
            start = 0.0
            stop = 1.0
            step = 0.5
            [[datasets]]
            name = "17Ind"
            path = "17Ind.csv"
            start = 197307
            end = 201512
            [[strategies]]
            kind = "S-MVP"
            [[strategies]]
            kind = "glasso"
            rho = "tune"
            [[strategies]]
            kind = "EN-MVP"
            rho = 0.4
            alpha = 0.3
        "#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.window_length, 60);
        assert_eq!(cfg.turnover, TurnoverConvention::Literal);
        assert_eq!(cfg.grid.points().unwrap(), vec![0.0, 0.5, 1.0]);
        let specs = cfg.strategy_specs().unwrap();
        assert_eq!(specs[1].kind, StrategyKind::Glasso);
        assert_eq!(specs[1].rho, None);
        assert_eq!(specs[2].rho, Some(0.4));
        assert_eq!(specs[2].alpha, Some(0.3));
        let range = cfg.datasets[0].date_range().unwrap().unwrap();
        assert_eq!(range.start, YearMonth::new(1973, 7).unwrap());
    }

    #[test]
    fn default_grid_has_31_points() {
        let pts = GridConfig::default().points().unwrap();
        assert_eq!(pts.len(), 31);
        assert_eq!(pts[30], 3.0);
        let parsed: GridConfig = "0:3:0.1".parse().unwrap();
        assert_eq!(parsed.points().unwrap(), pts);
        let single: GridConfig = "0.7:0.7:0.1".parse().unwrap();
        assert_eq!(single.points().unwrap(), vec![0.7]);
        assert!("0:1:0".parse::<GridConfig>().is_err());
        assert!("1:0:0.1".parse::<GridConfig>().is_err());
    }

    #[test]
    fn empty_dataset_list_is_rejected() {
        let err = RunConfig::default().validate().unwrap_err();
        assert!(err.to_string().contains("no datasets"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("windows = 3").is_err());
    }
}
