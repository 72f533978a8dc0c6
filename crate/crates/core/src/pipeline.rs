//! End-to-end stages: history → curves → parameters → basis → scenario values.

use std::time::Instant;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate_all, CalibrationFailure, CalibrationSettings, Regularization};
use crate::config::PipelineConfig;
use crate::curve_sim::{bootstrap_curves, build_simulation_basis, log_returns, BootstrapSettings, YieldCurveSet};
use crate::error::{Error, Result};
use crate::fdm::{FdmProblem, InstrumentSpec};
use crate::greedy::{adaptive_greedy, classical_greedy, GreedyContext, GreedyOutcome, Strategy};
use crate::market_data::{positivity_shift, RateHistory, TenorGrid};
use crate::params::ParameterSpace;
use crate::report::{extract_spot_value, Engine, ScenarioValues};
use crate::rom::{ReducedBasis, RomSolver};

/// Nineteen tenors from one month to fifty years.
pub const SAMPLE_TENORS: [&str; 19] = [
    "1M", "3M", "6M", "1Y", "2Y", "3Y", "4Y", "5Y", "6Y", "7Y", "8Y", "9Y", "10Y", "12Y", "15Y", "20Y", "25Y", "30Y",
    "50Y",
];

/// Daily history from a mean-reverting level/slope/curvature model, upward sloping and positive.
pub fn synthetic_history(observations: usize, seed: u64) -> Result<RateHistory> {
    if observations < 2 {
        return Err(Error::InvalidInput("a history needs at least two observations".into()));
    }
    let grid = TenorGrid::from_labels(&SAMPLE_TENORS)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
    let loadings: Vec<[f64; 3]> = grid
        .times()
        .iter()
        .map(|&t| {
            let x = t / 2.5;
            let slope = (1.0 - (-x).exp()) / x;
            [1.0, slope, slope - (-x).exp()]
        })
        .collect();
    let mean = [0.026, -0.016, -0.004];
    let reversion = [0.003, 0.004, 0.01];
    let vol = [0.0001, 0.0001, 0.00015];
    let mut factors = mean;
    let mut dates = Vec::with_capacity(observations);
    let mut day = NaiveDate::from_ymd_opt(2015, 1, 2).expect("valid date");
    let mut rates = DMatrix::zeros(observations, grid.len());
    for i in 0..observations {
        while matches!(day.weekday(), Weekday::Sat | Weekday::Sun) {
            day += Duration::days(1);
        }
        dates.push(day);
        day += Duration::days(1);
        for k in 0..3 {
            factors[k] += reversion[k] * (mean[k] - factors[k]) + vol[k] * normal();
        }
        for (j, l) in loadings.iter().enumerate() {
            let level: f64 = (0..3).map(|k| l[k] * factors[k]).sum();
            rates[(i, j)] = level + 0.0000002 * normal();
        }
    }
    RateHistory::new(grid, dates, rates)
}

pub fn simulate(history: &RateHistory, config: &PipelineConfig) -> Result<YieldCurveSet> {
    let (shifted, gamma) = positivity_shift(history, config.shift_epsilon);
    let returns = log_returns(&shifted, config.return_formula)?;
    let basis = build_simulation_basis(&returns, config.pca_components)?;
    let settings = BootstrapSettings {
        count: config.bootstrap_count,
        horizon_days: config.holding_period_days,
        seed: config.seed,
        forward_adjustment: config.forward_adjustment,
    };
    bootstrap_curves(&shifted, gamma, &basis, &settings)
}

pub fn calibration_settings(config: &PipelineConfig) -> CalibrationSettings {
    CalibrationSettings {
        b: config.statics.b,
        sigma: config.statics.sigma,
        r0_source: config.r0_source,
        convention: config.yield_convention,
        rule: Regularization::from_config(config.tikhonov_mu),
    }
}

/// Calibrates every curve, optionally dropping tenors beyond `max_tenor` years first.
pub fn calibrate(
    curves: &YieldCurveSet,
    config: &PipelineConfig,
    max_tenor: Option<f64>,
) -> Result<(ParameterSpace, Vec<CalibrationFailure>)> {
    let curves = match max_tenor {
        Some(h) => {
            let count = curves.grid.count_up_to(h);
            if count < 2 {
                return Err(Error::InvalidInput(format!("fewer than two tenors up to {h} years")));
            }
            curves.truncated(count)?
        }
        None => curves.clone(),
    };
    calibrate_all(&curves, &calibration_settings(config))
}

/// Shared pricing problem for all scenarios of `space`.
pub fn pricing_problem(spec: &InstrumentSpec, space: &ParameterSpace, config: &PipelineConfig) -> Result<FdmProblem> {
    let mut spots = space.r0.clone();
    spots.sort_by(f64::total_cmp);
    let center = spots[spots.len() / 2];
    let statics = space.group(0).statics();
    let problem = FdmProblem::from_config(spec.clone(), &statics, center, &config.fdm)?;
    if let Some((i, r)) = space
        .r0
        .iter()
        .enumerate()
        .find(|(_, &r)| r < problem.grid.lower || r > problem.grid.upper)
    {
        return Err(Error::InvalidInput(format!(
            "spot rate {r} of scenario {i} lies outside the rate grid [{}, {}]",
            problem.grid.lower, problem.grid.upper
        )));
    }
    Ok(problem)
}

pub fn train(
    space: &ParameterSpace,
    problem: &FdmProblem,
    config: &PipelineConfig,
    strategy: Strategy,
) -> Result<GreedyOutcome> {
    let ctx = GreedyContext {
        problem,
        config: &config.greedy,
        energy_level: config.energy_level,
        seed: config.seed,
    };
    match strategy {
        Strategy::Classical => classical_greedy(space, &ctx),
        Strategy::Adaptive => adaptive_greedy(space, &ctx),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizonMode {
    /// Read shorter horizons off the full march at the matching step.
    #[default]
    Checkpoint,
    /// Solve a separate instrument whose maturity is the horizon.
    SeparateRun,
}

/// Per-horizon scenario values and the wall time spent producing them.
#[derive(Debug, Clone)]
pub struct PricedScenarios {
    pub per_horizon: Vec<ScenarioValues>,
    pub seconds: f64,
}

impl PricedScenarios {
    /// Values at the final horizon (the instrument maturity).
    pub fn final_values(&self) -> &[f64] {
        &self.per_horizon.last().expect("at least one horizon").values
    }
}

/// Values every scenario at its own spot rate for each horizon (years, ascending, last = maturity).
pub fn price(
    space: &ParameterSpace,
    problem: &FdmProblem,
    basis: Option<&ReducedBasis>,
    horizons: &[f64],
    mode: HorizonMode,
) -> Result<PricedScenarios> {
    if horizons.is_empty() {
        return Err(Error::InvalidInput("no horizons requested".into()));
    }
    let start = Instant::now();
    let mut jobs: Vec<(FdmProblem, Vec<usize>)> = Vec::new();
    match mode {
        HorizonMode::Checkpoint => {
            let steps = horizons
                .iter()
                .map(|&h| problem.schedule.step_at(h))
                .collect::<Result<Vec<_>>>()?;
            jobs.push((problem.clone(), steps));
        }
        HorizonMode::SeparateRun => {
            for &h in horizons {
                let mut p = problem.clone();
                if (h - problem.spec.maturity).abs() > 1e-12 {
                    let mut spec = problem.spec.clone();
                    spec.maturity = h;
                    p = FdmProblem::new(
                        spec,
                        problem.grid.clone(),
                        &crate::config::FdmConfig {
                            m: problem.size(),
                            theta: problem.theta,
                            dt_days: problem.schedule.dt * crate::market_data::DAYS_PER_YEAR,
                            window: Some([problem.grid.lower, problem.grid.upper]),
                            march: problem.march,
                        },
                    )?;
                }
                let last = p.schedule.steps;
                jobs.push((p, vec![last]));
            }
        }
    }
    let engine = if basis.is_some() { Engine::Rom } else { Engine::Hdm };
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (job, steps) in &jobs {
        let solver = basis.map(|b| RomSolver::new(job, b)).transpose()?;
        let rows: Vec<Vec<f64>> = (0..space.len())
            .into_par_iter()
            .map(|i| {
                let rho = space.group(i);
                let spot = rho.r0;
                match (&solver, basis) {
                    (Some(solver), Some(b)) => {
                        let sol = solver.solve(&rho, steps, None)?;
                        steps.iter().map(|&n| sol.value_at(b, &job.grid, n, spot)).collect()
                    }
                    _ => {
                        let sol = job.solve(&rho, steps)?;
                        (0..steps.len())
                            .map(|k| {
                                extract_spot_value(
                                    &sol.values.column(k).iter().copied().collect::<Vec<_>>(),
                                    spot,
                                    &job.grid,
                                )
                            })
                            .collect()
                    }
                }
            })
            .collect::<Result<_>>()?;
        for k in 0..steps.len() {
            columns.push(rows.iter().map(|r| r[k]).collect());
        }
    }
    let per_horizon = columns
        .into_iter()
        .zip(horizons)
        .map(|(values, &h)| ScenarioValues::new(values, space.r0.clone(), h, engine))
        .collect::<Result<Vec<_>>>()?;
    Ok(PricedScenarios {
        per_horizon,
        seconds: start.elapsed().as_secs_f64(),
    })
}
