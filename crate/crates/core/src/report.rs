//! Scenario figures (90th/50th/10th percentile values) and engine timings.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdm::RateGrid;

pub const SCENARIO_RANKS: [f64; 3] = [90.0, 50.0, 10.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Hdm,
    Rom,
}

impl std::fmt::Display for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Engine::Hdm => "hdm",
            Engine::Rom => "rom",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioValues {
    pub values: Vec<f64>,
    pub spot_rates: Vec<f64>,
    pub horizon: f64,
    pub engine: Engine,
}

impl ScenarioValues {
    pub fn new(values: Vec<f64>, spot_rates: Vec<f64>, horizon: f64, engine: Engine) -> Result<Self> {
        if values.len() != spot_rates.len() {
            return Err(Error::Dimension(format!(
                "{} values for {} spot rates",
                values.len(),
                spot_rates.len()
            )));
        }
        if values.is_empty() {
            return Err(Error::InvalidInput("no scenario values".into()));
        }
        if values.iter().chain(&spot_rates).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite scenario value".into()));
        }
        Ok(Self {
            values,
            spot_rates,
            horizon,
            engine,
        })
    }
}

/// Linear interpolation of a nodal value vector at `spot`.
pub fn extract_spot_value(values: &[f64], spot: f64, grid: &RateGrid) -> Result<f64> {
    grid.interpolate(values, spot)
}

/// Nearest-rank percentile: `sorted[ceil(q/100 · s) - 1]`, with rank clamped to `[1, s]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let s = sorted.len();
    let rank = ((q / 100.0) * s as f64).ceil() as usize;
    sorted[rank.clamp(1, s) - 1]
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFigures {
    pub horizon: f64,
    pub favorable: f64,
    pub moderate: f64,
    pub unfavorable: f64,
}

pub fn percentile_scenarios(values: &ScenarioValues) -> ScenarioFigures {
    let s = sorted(&values.values);
    ScenarioFigures {
        horizon: values.horizon,
        favorable: percentile(&s, SCENARIO_RANKS[0]),
        moderate: percentile(&s, SCENARIO_RANKS[1]),
        unfavorable: percentile(&s, SCENARIO_RANKS[2]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub engine: Engine,
    pub scenarios: usize,
    pub percentile_ranks: [f64; 3],
    pub horizons: Vec<ScenarioFigures>,
    /// Seconds spent valuing all scenarios.
    pub evaluation_seconds: Option<f64>,
    pub basis_dim: Option<usize>,
}

impl ScenarioReport {
    pub fn new(engine: Engine, per_horizon: &[ScenarioValues]) -> Result<Self> {
        let scenarios = per_horizon.first().map(|v| v.values.len()).unwrap_or(0);
        if per_horizon
            .iter()
            .any(|v| v.values.len() != scenarios || v.engine != engine)
        {
            return Err(Error::Dimension("horizons disagree on scenario count or engine".into()));
        }
        Ok(Self {
            engine,
            scenarios,
            percentile_ranks: SCENARIO_RANKS,
            horizons: per_horizon.iter().map(percentile_scenarios).collect(),
            evaluation_seconds: None,
            basis_dim: None,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Rows are scenarios, columns are horizons; figures in percent of nominal.
    pub fn table(&self, nominal: f64) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<14}", "Scenario");
        for h in &self.horizons {
            let _ = write!(out, "{:>12}", format!("{} years", fmt_years(h.horizon)));
        }
        out.push('\n');
        let rows: [(&str, fn(&ScenarioFigures) -> f64); 3] = [
            ("Favorable", |f| f.favorable),
            ("Moderate", |f| f.moderate),
            ("Unfavorable", |f| f.unfavorable),
        ];
        for (name, get) in rows {
            let _ = write!(out, "{name:<14}");
            for h in &self.horizons {
                let _ = write!(out, "{:>11.2}%", 100.0 * get(h) / nominal);
            }
            out.push('\n');
        }
        out
    }
}

fn fmt_years(y: f64) -> String {
    if (y - y.round()).abs() < 1e-9 {
        format!("{}", y.round() as i64)
    } else {
        format!("{y:.2}")
    }
}

/// Wall-clock seconds of the median of three runs, plus the last run's output.
pub fn median_of_three<T>(mut f: impl FnMut() -> Result<T>) -> Result<(f64, T)> {
    let mut times = [0.0; 3];
    let mut out = None;
    for t in &mut times {
        let start = Instant::now();
        out = Some(f()?);
        *t = start.elapsed().as_secs_f64();
    }
    times.sort_by(f64::total_cmp);
    Ok((times[1], out.expect("ran three times")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineTiming {
    pub per_solve_seconds: f64,
    pub total_seconds: f64,
    /// Solves actually timed; totals are scaled up from these when smaller than `scenarios`.
    pub measured_solves: usize,
    pub extrapolated: bool,
}

impl EngineTiming {
    pub fn from_sample(per_solve_seconds: f64, measured_solves: usize, scenarios: usize) -> Self {
        Self {
            per_solve_seconds,
            total_seconds: per_solve_seconds * scenarios as f64,
            measured_solves,
            extrapolated: measured_solves < scenarios,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisTiming {
    pub strategy: String,
    pub reduction_seconds: f64,
    pub dim: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub scenarios: usize,
    pub grid_points: usize,
    pub steps: usize,
    pub hdm: EngineTiming,
    pub rom: EngineTiming,
    pub reductions: Vec<BasisTiming>,
    pub threads: usize,
    pub timing_method: String,
}

impl Benchmark {
    /// `HDM total / (reduction time + ROM total)` for each reduction.
    pub fn speedups(&self) -> Vec<f64> {
        self.reductions
            .iter()
            .map(|r| self.hdm.total_seconds / (r.reduction_seconds + self.rom.total_seconds))
            .collect()
    }

    pub fn per_solve_ratio(&self) -> f64 {
        self.rom.per_solve_seconds / self.hdm.per_solve_seconds
    }

    pub fn to_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("benchmark serializes");
        value["speedups"] = serde_json::json!(self.speedups());
        serde_json::to_string_pretty(&value).expect("benchmark serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn values(v: Vec<f64>) -> ScenarioValues {
        let n = v.len();
        ScenarioValues::new(v, vec![0.01; n], 10.0, Engine::Hdm).unwrap()
    }

    #[test]
    fn ladder_percentiles() {
        let f = percentile_scenarios(&values((1..=100).map(f64::from).collect()));
        assert_eq!((f.unfavorable, f.moderate, f.favorable), (10.0, 50.0, 90.0));
        let f = percentile_scenarios(&values(vec![7.5; 13]));
        assert_eq!((f.unfavorable, f.moderate, f.favorable), (7.5, 7.5, 7.5));
        let f = percentile_scenarios(&values(vec![3.0]));
        assert_eq!((f.unfavorable, f.favorable), (3.0, 3.0));
    }

    #[test]
    fn spot_value_interpolates() {
        let grid = RateGrid::uniform(0.0, 0.2, 3).unwrap();
        assert_eq!(extract_spot_value(&[1.0, 1.1, 1.3], 0.1, &grid).unwrap(), 1.1);
        assert!((extract_spot_value(&[1.0, 1.1, 1.3], 0.05, &grid).unwrap() - 1.05).abs() < 1e-14);
        assert!(matches!(
            extract_spot_value(&[1.0, 1.1, 1.3], 0.3, &grid),
            Err(Error::OutOfDomain { .. })
        ));
    }

    #[test]
    fn table_layout() {
        let ten = values(vec![99.0, 100.0, 101.0]);
        let mut five = values(vec![98.0, 100.0, 102.0]);
        five.horizon = 5.0;
        assert!(ScenarioReport::new(Engine::Rom, std::slice::from_ref(&ten)).is_err());
        let report = ScenarioReport::new(Engine::Hdm, &[five, ten]).unwrap();
        let text = report.table(100.0);
        assert!(text.starts_with("Scenario"));
        assert!(text.contains("5 years") && text.contains("10 years"));
        assert!(text.lines().nth(1).unwrap().starts_with("Favorable"));
        assert!(text.contains("102.00%"));
    }

    #[test]
    fn speedup_direction_for_single_scenario() {
        let bench = Benchmark {
            scenarios: 1,
            grid_points: 600,
            steps: 3600,
            hdm: EngineTiming::from_sample(0.02, 1, 1),
            rom: EngineTiming::from_sample(0.001, 1, 1),
            reductions: vec![BasisTiming {
                strategy: "adaptive".into(),
                reduction_seconds: 1.0,
                dim: 6,
                iterations: 4,
            }],
            threads: 1,
            timing_method: "median of 3".into(),
        };
        assert!(bench.speedups()[0] < 1.0);
        let json: serde_json::Value = serde_json::from_str(&bench.to_json()).unwrap();
        assert!(json["speedups"].is_array());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn matches_sort_oracle_and_stays_ordered(v in proptest::collection::vec(-1e3f64..1e3, 1..300)) {
            let mut oracle = v.clone();
            oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let s = oracle.len();
            let f = percentile_scenarios(&values(v));
            let at = |q: usize| oracle[(q * s).div_ceil(100).max(1) - 1];
            prop_assert_eq!(f.favorable, at(90));
            prop_assert_eq!(f.moderate, at(50));
            prop_assert_eq!(f.unfavorable, at(10));
            prop_assert!(f.unfavorable <= f.moderate && f.moderate <= f.favorable);
        }
    }
}
