//! Historical rate data: tenor grids, rate histories and their CSV format.
//!
//! Rates are held as decimal fractions per year. A history file may declare
//! `unit=percent` as the last header field, in which case values are divided
//! by 100 once, on load. Observation dates are metadata; everything
//! downstream works on row indices.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Days per year used to convert day counts to year fractions.
pub const DAYS_PER_YEAR: f64 = 360.0;

/// Year fraction for a tenor label such as `1D`, `2W`, `6M`, `10Y` or `ON`.
pub fn parse_tenor(label: &str) -> Result<f64> {
    let trimmed = label.trim();
    let upper = trimmed.to_ascii_uppercase();
    if upper == "ON" || upper == "O/N" {
        return Ok(1.0 / DAYS_PER_YEAR);
    }
    let err = || Error::TenorParse(label.to_string());
    let unit = upper.chars().last().ok_or_else(err)?;
    let count: f64 = upper[..upper.len() - 1].parse().map_err(|_| err())?;
    if !count.is_finite() || count < 0.0 {
        return Err(err());
    }
    let years = match unit {
        'D' => count / DAYS_PER_YEAR,
        'W' => 7.0 * count / DAYS_PER_YEAR,
        'M' => count / 12.0,
        'Y' => count,
        _ => return Err(err()),
    };
    Ok(years)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TenorGrid {
    labels: Vec<String>,
    times: Vec<f64>,
}

impl TenorGrid {
    pub fn new(labels: Vec<String>, times: Vec<f64>) -> Result<Self> {
        if labels.len() != times.len() {
            return Err(Error::Dimension(format!(
                "{} tenor labels but {} tenor times",
                labels.len(),
                times.len()
            )));
        }
        if times.len() < 2 {
            return Err(Error::InvalidInput("a tenor grid needs at least two points".into()));
        }
        if times.iter().any(|t| !t.is_finite()) || times[0] < 0.0 {
            return Err(Error::InvalidInput(
                "tenor times must be finite and non-negative".into(),
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("tenor times must be strictly increasing".into()));
        }
        Ok(Self { labels, times })
    }

    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Result<Self> {
        let times = labels
            .iter()
            .map(|l| parse_tenor(l.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(labels.iter().map(|l| l.as_ref().trim().to_string()).collect(), times)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("grid is non-empty")
    }

    /// Number of leading tenors with maturity at most `horizon` (plus a small tolerance).
    pub fn count_up_to(&self, horizon: f64) -> usize {
        self.times.iter().take_while(|&&t| t <= horizon + 1e-9).count()
    }

    pub fn truncated(&self, count: usize) -> Result<Self> {
        Self::new(self.labels[..count].to_vec(), self.times[..count].to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateHistory {
    pub grid: TenorGrid,
    pub dates: Vec<NaiveDate>,
    /// `n × m`, oldest observation first.
    pub rates: DMatrix<f64>,
}

impl RateHistory {
    pub fn new(grid: TenorGrid, dates: Vec<NaiveDate>, rates: DMatrix<f64>) -> Result<Self> {
        if rates.ncols() != grid.len() || rates.nrows() != dates.len() {
            return Err(Error::Dimension(format!(
                "rates are {}×{}, expected {}×{}",
                rates.nrows(),
                rates.ncols(),
                dates.len(),
                grid.len()
            )));
        }
        if rates.nrows() < 2 {
            return Err(Error::InvalidInput(
                "a rate history needs at least two observations".into(),
            ));
        }
        if let Some(i) = dates.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::NonMonotonicDates { line: i + 3 });
        }
        if rates.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidInput("rate history has non-finite entries".into()));
        }
        Ok(Self { grid, dates, rates })
    }

    pub fn observations(&self) -> usize {
        self.rates.nrows()
    }

    pub fn tenors(&self) -> usize {
        self.rates.ncols()
    }

    /// The most recent observed curve.
    pub fn last_curve(&self) -> Vec<f64> {
        self.rates.row(self.rates.nrows() - 1).iter().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateUnit {
    Decimal,
    Percent,
}

pub fn load_rate_history(path: impl AsRef<Path>) -> Result<RateHistory> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_rate_history(BufReader::new(file))
}

pub fn read_rate_history<R: Read>(reader: R) -> Result<RateHistory> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = csv.records();
    let header = records.next().ok_or(Error::Parse {
        line: 1,
        message: "empty file".into(),
    })??;
    let mut fields: Vec<&str> = header.iter().collect();
    if fields.first().map(|f| f.eq_ignore_ascii_case("date")) != Some(true) {
        return Err(Error::Parse {
            line: 1,
            message: "header must start with `date`".into(),
        });
    }
    let mut unit = RateUnit::Decimal;
    if let Some(last) = fields.last() {
        if let Some(value) = last.strip_prefix("unit=") {
            unit = match value {
                "percent" => RateUnit::Percent,
                "decimal" => RateUnit::Decimal,
                other => {
                    return Err(Error::Parse {
                        line: 1,
                        message: format!("unknown unit `{other}`"),
                    })
                }
            };
            fields.pop();
        }
    }
    let grid = TenorGrid::from_labels(&fields[1..])?;
    let m = grid.len();
    let scale = match unit {
        RateUnit::Decimal => 1.0,
        RateUnit::Percent => 0.01,
    };

    let mut dates = Vec::new();
    let mut values = Vec::new();
    for (idx, record) in records.enumerate() {
        let line = idx + 2;
        let record = record?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let date_field = record.get(0).unwrap_or("");
        let date = NaiveDate::parse_from_str(date_field, "%Y-%m-%d").map_err(|e| Error::Parse {
            line,
            message: format!("bad date `{date_field}`: {e}"),
        })?;
        let extra_ok = record.len() == m + 2 && record.get(m + 1) == Some("");
        if record.len() < m + 1 {
            return Err(Error::MissingValue {
                line,
                column: record.len() + 1,
            });
        }
        if record.len() > m + 1 && !extra_ok {
            return Err(Error::Parse {
                line,
                message: format!("expected {} rates, found {}", m, record.len() - 1),
            });
        }
        for column in 1..=m {
            let cell = record.get(column).unwrap_or("");
            if cell.is_empty() {
                return Err(Error::MissingValue {
                    line,
                    column: column + 1,
                });
            }
            let value: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad number `{cell}` in column {}", column + 1),
            })?;
            if !value.is_finite() {
                return Err(Error::MissingValue {
                    line,
                    column: column + 1,
                });
            }
            values.push(value * scale);
        }
        if let Some(prev) = dates.last() {
            if date <= *prev {
                return Err(Error::NonMonotonicDates { line });
            }
        }
        dates.push(date);
    }
    let n = dates.len();
    let rates = DMatrix::from_row_slice(n, m, &values);
    RateHistory::new(grid, dates, rates)
}

/// Writes the history in decimal units; values use the shortest round-trip representation.
pub fn write_rate_history<W: Write>(history: &RateHistory, writer: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    let mut header = vec!["date".to_string()];
    header.extend(history.grid.labels().iter().cloned());
    header.push("unit=decimal".into());
    csv.write_record(&header)?;
    for (i, date) in history.dates.iter().enumerate() {
        let mut row = vec![date.format("%Y-%m-%d").to_string()];
        row.extend(history.rates.row(i).iter().map(|v| v.to_string()));
        row.push(String::new());
        csv.write_record(&row)?;
    }
    csv.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn save_rate_history(history: &RateHistory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_rate_history(history, file)
}

/// Shift making every rate strictly positive.
///
/// `gamma = max(0, -min) + epsilon` when the minimum rate is `<= 0`, else 0.
pub fn positivity_shift(history: &RateHistory, shift_epsilon: f64) -> (RateHistory, f64) {
    let min = history.rates.min();
    let gamma = if min <= 0.0 {
        (-min).max(0.0) + shift_epsilon
    } else {
        0.0
    };
    let mut shifted = history.clone();
    if gamma != 0.0 {
        shifted.rates.add_scalar_mut(gamma);
    }
    (shifted, gamma)
}
