//! Monthly return panels in the Ken French CSV layout.
//!
//! Input files must already be trimmed to a single table: one header row whose
//! first field is the date column, followed by `YYYYMM,<value>,<value>,...`
//! rows. Values are percent returns; `-99.99` and `-999` mark missing cells.

use std::fmt;
use std::io::Read;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

/// Sentinels compared by exact equality after parsing.
pub const MISSING_SENTINELS: [f64; 2] = [-99.99, -999.0];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing header row")]
    MissingHeader,

    #[error("row {row}: expected {expected} fields, found {found}")]
    FieldCount {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("row {row}: cannot parse {field:?} as a number")]
    BadNumber { row: usize, field: String },

    #[error("row {row}: date {field:?} is not a YYYYMM stamp")]
    BadDate { row: usize, field: String },

    #[error("row {row}: date {date} does not follow {previous} by one month")]
    NotMonthly {
        row: usize,
        date: YearMonth,
        previous: YearMonth,
    },

    #[error("panel is empty after applying the date range")]
    EmptyPanel,

    #[error("panel needs at least {required} {what}, found {found}")]
    TooSmall {
        what: &'static str,
        required: usize,
        found: usize,
    },

    #[error("column {column:?} starts with a missing value and cannot be forward-filled")]
    LeadingGap { column: String },

    #[error("column {column:?} has zero variance")]
    DegenerateColumn { column: String },

    #[error("panel still contains {0} missing cells")]
    Unsanitized(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Option<Self> {
        (1..=12).contains(&month).then_some(Self { year, month })
    }

    /// Parses an integer `YYYYMM` stamp such as `197307`.
    pub fn from_yyyymm(stamp: i64) -> Option<Self> {
        if !(100..=999_912).contains(&stamp) {
            return None;
        }
        Self::new((stamp / 100) as i32, (stamp % 100) as u32)
    }

    pub fn to_yyyymm(self) -> i64 {
        self.year as i64 * 100 + self.month as i64
    }

    pub fn next(self) -> Self {
        if self.month == 12 {
            Self {
                year: self.year + 1,
                month: 1,
            }
        } else {
            Self {
                year: self.year,
                month: self.month + 1,
            }
        }
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

/// Inclusive range of months.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: YearMonth,
    pub end: YearMonth,
}

impl DateRange {
    pub fn contains(&self, d: YearMonth) -> bool {
        self.start <= d && d <= self.end
    }
}

/// Dated `n x p` matrix of monthly percent returns.
///
/// Missing cells hold `NaN` until [`forward_fill`] runs; `missing_mask`
/// keeps the original positions for auditing either way.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsPanel {
    pub dates: Vec<YearMonth>,
    pub assets: Vec<String>,
    pub returns: DMatrix<f64>,
    pub missing_mask: DMatrix<bool>,
}

impl ReturnsPanel {
    pub fn new(
        dates: Vec<YearMonth>,
        assets: Vec<String>,
        returns: DMatrix<f64>,
    ) -> Result<Self, IngestError> {
        let mask = returns.map(|x| !x.is_finite());
        let panel = Self {
            dates,
            assets,
            returns,
            missing_mask: mask,
        };
        panel.validate_shape()?;
        Ok(panel)
    }

    fn validate_shape(&self) -> Result<(), IngestError> {
        let (n, p) = self.returns.shape();
        if n < 2 {
            return Err(IngestError::TooSmall {
                what: "rows",
                required: 2,
                found: n,
            });
        }
        if p < 2 {
            return Err(IngestError::TooSmall {
                what: "assets",
                required: 2,
                found: p,
            });
        }
        assert_eq!(self.dates.len(), n, "one date per row");
        assert_eq!(self.assets.len(), p, "one label per column");
        for (k, pair) in self.dates.windows(2).enumerate() {
            if pair[1] != pair[0].next() {
                return Err(IngestError::NotMonthly {
                    row: k + 1,
                    date: pair[1],
                    previous: pair[0],
                });
            }
        }
        Ok(())
    }

    pub fn n_obs(&self) -> usize {
        self.returns.nrows()
    }

    pub fn n_assets(&self) -> usize {
        self.returns.ncols()
    }

    /// Cells flagged missing at parse time.
    pub fn missing_count(&self) -> usize {
        self.missing_mask.iter().filter(|&&m| m).count()
    }

    /// Cells that are currently not finite.
    pub fn unfilled_count(&self) -> usize {
        self.returns.iter().filter(|x| !x.is_finite()).count()
    }

    pub fn is_sanitized(&self) -> bool {
        self.unfilled_count() == 0
    }

    /// Rows `[start, end)` as an owned block.
    pub fn rows(&self, start: usize, end: usize) -> DMatrix<f64> {
        self.returns.rows(start, end - start).into_owned()
    }

    /// Copy with only the listed columns, in the listed order.
    pub fn select_assets(&self, cols: &[usize]) -> Self {
        let n = self.n_obs();
        Self {
            dates: self.dates.clone(),
            assets: cols.iter().map(|&c| self.assets[c].clone()).collect(),
            returns: DMatrix::from_fn(n, cols.len(), |i, j| self.returns[(i, cols[j])]),
            missing_mask: DMatrix::from_fn(n, cols.len(), |i, j| self.missing_mask[(i, cols[j])]),
        }
    }
}

fn parse_value(raw: &str, row: usize) -> Result<f64, IngestError> {
    let v: f64 = raw.trim().parse().map_err(|_| IngestError::BadNumber {
        row,
        field: raw.to_string(),
    })?;
    if MISSING_SENTINELS.contains(&v) {
        return Ok(f64::NAN);
    }
    if !v.is_finite() {
        return Err(IngestError::BadNumber {
            row,
            field: raw.to_string(),
        });
    }
    Ok(v)
}

/// Parses a header-bearing monthly return CSV, keeping rows inside
/// `date_range` when one is given. Row numbers in errors are 1-based file
/// lines.
pub fn parse_panel<R: Read>(
    source: R,
    date_range: Option<DateRange>,
) -> Result<ReturnsPanel, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let mut records = reader.records();
    let header = records.next().ok_or(IngestError::MissingHeader)??;
    if header.len() < 2 {
        return Err(IngestError::MissingHeader);
    }
    let assets: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let width = header.len();

    let mut dates = Vec::new();
    let mut values = Vec::new();
    for (k, record) in records.enumerate() {
        let row = k + 2;
        let record = record?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if record.len() != width {
            return Err(IngestError::FieldCount {
                row,
                expected: width,
                found: record.len(),
            });
        }
        let stamp = &record[0];
        let date = (stamp.len() == 6)
            .then(|| stamp.parse::<i64>().ok())
            .flatten()
            .and_then(YearMonth::from_yyyymm)
            .ok_or_else(|| IngestError::BadDate {
                row,
                field: stamp.to_string(),
            })?;
        let parsed = record
            .iter()
            .skip(1)
            .map(|f| parse_value(f, row))
            .collect::<Result<Vec<_>, _>>()?;
        if date_range.is_some_and(|r| !r.contains(date)) {
            continue;
        }
        dates.push(date);
        values.extend(parsed);
    }
    if dates.is_empty() {
        return Err(IngestError::EmptyPanel);
    }
    let returns = DMatrix::from_row_slice(dates.len(), assets.len(), &values);
    ReturnsPanel::new(dates, assets, returns)
}

/// Replaces every missing cell with the last observed value above it.
pub fn forward_fill(panel: &ReturnsPanel) -> Result<ReturnsPanel, IngestError> {
    let mut out = panel.clone();
    for j in 0..out.n_assets() {
        let mut last: Option<f64> = None;
        for i in 0..out.n_obs() {
            let v = out.returns[(i, j)];
            if v.is_finite() {
                last = Some(v);
            } else {
                match last {
                    Some(prev) => out.returns[(i, j)] = prev,
                    None => {
                        return Err(IngestError::LeadingGap {
                            column: out.assets[j].clone(),
                        })
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetStats {
    pub asset: String,
    pub mean: f64,
    pub variance: f64,
    pub sharpe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveStats {
    pub n: usize,
    pub p: usize,
    pub dim_ratio: f64,
    pub missing_cells: usize,
    pub max_corr: f64,
    pub mean_abs_corr: f64,
    pub per_asset: Vec<AssetStats>,
}

/// Full-sample correlation summary and per-asset Sharpe ratios (risk-free
/// rate zero, percent units).
pub fn describe(panel: &ReturnsPanel) -> Result<DescriptiveStats, IngestError> {
    let unfilled = panel.unfilled_count();
    if unfilled > 0 {
        return Err(IngestError::Unsanitized(unfilled));
    }
    let (n, p) = panel.returns.shape();
    let cov = linalg::sample_covariance(&panel.returns).map_err(|_| IngestError::TooSmall {
        what: "rows",
        required: 2,
        found: n,
    })?;
    let var = cov.diagonal();
    if let Some(j) = var.iter().position(|&v| v <= 0.0) {
        return Err(IngestError::DegenerateColumn {
            column: panel.assets[j].clone(),
        });
    }

    let mut max_corr = f64::NEG_INFINITY;
    let mut abs_sum = 0.0;
    for i in 0..p {
        for j in (i + 1)..p {
            let r = (cov.get(i, j) / (var[i] * var[j]).sqrt()).clamp(-1.0, 1.0);
            max_corr = max_corr.max(r);
            abs_sum += r.abs();
        }
    }
    let pairs = (p * (p - 1) / 2) as f64;

    let per_asset = panel
        .assets
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let mean = panel.returns.column(j).mean();
            AssetStats {
                asset: name.clone(),
                mean,
                variance: var[j],
                sharpe: mean / var[j].sqrt(),
            }
        })
        .collect();

    Ok(DescriptiveStats {
        n,
        p,
        dim_ratio: p as f64 / n as f64,
        missing_cells: panel.missing_count(),
        max_corr,
        mean_abs_corr: abs_sum / pairs,
        per_asset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "Date,A,B\n197307,1.0,2.0\n197308,-999,3.0\n197309,0.5,-1.5\n";

    #[test]
    fn sentinel_flags_one_cell() {
        let panel = parse_panel(SMALL.as_bytes(), None).unwrap();
        assert_eq!(panel.n_obs(), 3);
        assert_eq!(panel.assets, vec!["A", "B"]);
        assert_eq!(panel.missing_count(), 1);
        assert!(panel.missing_mask[(1, 0)]);
    }

    #[test]
    fn legitimate_extreme_returns_survive() {
        let csv = "Date,A,B\n197307,-99.98,2.0\n197308,-99.0,3.0\n";
        let panel = parse_panel(csv.as_bytes(), None).unwrap();
        assert_eq!(panel.missing_count(), 0);
        assert_eq!(panel.returns[(0, 0)], -99.98);
    }

    #[test]
    fn ken_french_header_with_blank_date_label() {
        let csv = ",Food ,Mines \n197307,  1.20, -0.50\n197308, -99.99,  0.25\n";
        let panel = parse_panel(csv.as_bytes(), None).unwrap();
        assert_eq!(panel.assets, vec!["Food", "Mines"]);
        assert_eq!(panel.missing_count(), 1);
    }

    #[test]
    fn date_range_filters_rows() {
        let r = DateRange {
            start: YearMonth::new(1973, 8).unwrap(),
            end: YearMonth::new(1973, 9).unwrap(),
        };
        let panel = parse_panel(SMALL.as_bytes(), Some(r)).unwrap();
        assert_eq!(panel.n_obs(), 2);
        assert_eq!(panel.dates[0], YearMonth::new(1973, 8).unwrap());

        let empty = DateRange {
            start: YearMonth::new(2000, 1).unwrap(),
            end: YearMonth::new(2000, 12).unwrap(),
        };
        assert!(matches!(
            parse_panel(SMALL.as_bytes(), Some(empty)),
            Err(IngestError::EmptyPanel)
        ));
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let short = "Date,A,B\n197307,1.0,2.0\n197308,1.0\n";
        match parse_panel(short.as_bytes(), None) {
            Err(IngestError::FieldCount { row, expected, found }) => {
                assert_eq!((row, expected, found), (3, 3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
        let bad = "Date,A,B\n197307,1.0,2.0\n197308,abc,1.0\n";
        assert!(matches!(
            parse_panel(bad.as_bytes(), None),
            Err(IngestError::BadNumber { row: 3, .. })
        ));
        let bad_date = "Date,A,B\n1973-07,1.0,2.0\n197308,1.0,1.0\n";
        assert!(matches!(
            parse_panel(bad_date.as_bytes(), None),
            Err(IngestError::BadDate { row: 2, .. })
        ));
        let gap = "Date,A,B\n197307,1.0,2.0\n197309,1.0,1.0\n";
        assert!(matches!(
            parse_panel(gap.as_bytes(), None),
            Err(IngestError::NotMonthly { .. })
        ));
    }

    #[test]
    fn forward_fill_propagates_last_value() {
        let csv = "Date,A,B\n197307,5.0,1.0\n197308,-99.99,1.0\n197309,2.0,1.0\n";
        let panel = parse_panel(csv.as_bytes(), None).unwrap();
        let filled = forward_fill(&panel).unwrap();
        assert_eq!(filled.returns.column(0).as_slice(), &[5.0, 5.0, 2.0]);
        assert_eq!(filled.returns.column(1).as_slice(), &[1.0, 1.0, 1.0]);
        assert!(filled.is_sanitized());
        assert_eq!(filled.missing_count(), 1);
        assert_eq!(forward_fill(&filled).unwrap(), filled);
    }

    #[test]
    fn leading_gap_is_an_error() {
        let csv = "Date,A,B\n197307,1.0,-999\n197308,2.0,1.0\n";
        let panel = parse_panel(csv.as_bytes(), None).unwrap();
        match forward_fill(&panel) {
            Err(IngestError::LeadingGap { column }) => assert_eq!(column, "B"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicated_column_has_unit_correlation() {
        let csv = "Date,A,B,C\n197307,1.0,1.0,0.3\n197308,2.0,2.0,-0.1\n197309,-1.0,-1.0,0.2\n";
        let panel = parse_panel(csv.as_bytes(), None).unwrap();
        let stats = describe(&panel).unwrap();
        assert!((stats.max_corr - 1.0).abs() < 1e-12);
        assert!(stats.mean_abs_corr <= 1.0);
        assert_eq!(stats.dim_ratio, 3.0 / 3.0);
        let a = &stats.per_asset[0];
        assert!((a.mean - 2.0 / 3.0).abs() < 1e-12);
        assert!((a.sharpe - a.mean / a.variance.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_column_rejected() {
        let csv = "Date,A,B\n197307,1.0,2.0\n197308,1.0,3.0\n";
        let panel = parse_panel(csv.as_bytes(), None).unwrap();
        assert!(matches!(
            describe(&panel),
            Err(IngestError::DegenerateColumn { .. })
        ));
    }
}
