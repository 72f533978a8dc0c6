//! Snapshot selection: classical greedy over a random candidate set, and the adaptive
//! variant that grows its candidate set with a principal-component-regression surrogate.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::GreedyConfig;
use crate::error::{Error, Result};
use crate::fdm::FdmProblem;
use crate::linalg::{least_squares, thin_svd};
use crate::params::ParameterSpace;
use crate::rom::{build_basis, relative_error, ReducedBasis, ResidualOptions, RomSolver, SnapshotMatrix};

/// Linear surrogate on standardized predictors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    /// One coefficient per original predictor column; dropped columns hold 0.
    pub eta: Vec<f64>,
    pub kept_components: usize,
    pub predictor_mean: Vec<f64>,
    pub predictor_scale: Vec<f64>,
    pub response_mean: f64,
    pub response_scale: f64,
    /// Columns left out for having zero variance.
    pub dropped: Vec<usize>,
}

impl SurrogateModel {
    /// Prediction on the standardized response scale; ranks identically to [`Self::predict`].
    pub fn score(&self, x: &[f64]) -> f64 {
        self.eta
            .iter()
            .enumerate()
            .filter(|(j, _)| self.predictor_scale[*j] > 0.0)
            .map(|(j, e)| e * (x[j] - self.predictor_mean[j]) / self.predictor_scale[j])
            .sum()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.response_mean + self.response_scale * self.score(x)
    }
}

fn mean_and_scale(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, var.sqrt())
}

/// Principal component regression of `response` on the rows of `design`, keeping up to
/// `components` leading directions (capped at `rows - 1` and the design rank).
pub fn fit_pcr_surrogate(design: &DMatrix<f64>, response: &[f64], components: usize) -> Result<SurrogateModel> {
    let (n, m) = design.shape();
    if n < 2 || response.len() != n {
        return Err(Error::InvalidInput(format!(
            "surrogate needs at least two rows and one response per row ({n} rows, {} responses)",
            response.len()
        )));
    }
    if components < 1 {
        return Err(Error::InvalidInput("surrogate needs at least one component".into()));
    }
    let mut predictor_mean = vec![0.0; m];
    let mut predictor_scale = vec![0.0; m];
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..m {
        let (mu, sd) = mean_and_scale(design.column(j).iter().copied(), n);
        predictor_mean[j] = mu;
        if sd > 1e-14 * mu.abs().max(1e-300) && sd > 0.0 {
            predictor_scale[j] = sd;
            kept.push(j);
        } else {
            dropped.push(j);
        }
    }
    if kept.is_empty() {
        return Err(Error::DegenerateDesign);
    }
    let (response_mean, response_sd) = mean_and_scale(response.iter().copied(), n);
    let mut model = SurrogateModel {
        eta: vec![0.0; m],
        kept_components: 0,
        predictor_mean,
        predictor_scale,
        response_mean,
        response_scale: if response_sd > 0.0 { response_sd } else { 1.0 },
        dropped,
    };
    if !(response_sd > 0.0) {
        return Ok(model);
    }
    let xs = DMatrix::from_fn(n, kept.len(), |i, k| {
        let j = kept[k];
        (design[(i, j)] - model.predictor_mean[j]) / model.predictor_scale[j]
    });
    let ys = DVector::from_iterator(n, response.iter().map(|y| (y - response_mean) / response_sd));
    let svd = thin_svd(&xs)?;
    let p = components.min(n - 1).min(kept.len()).min(svd.rank(1e-12)).max(1);
    let psi = svd.v_t.rows(0, p).transpose();
    let z = &xs * &psi;
    let omega = least_squares(&z, &ys)?;
    let eta = psi * omega;
    for (k, &j) in kept.iter().enumerate() {
        model.eta[j] = eta[k];
    }
    model.kept_components = p;
    Ok(model)
}

/// Scores every row of `space`.
pub fn evaluate_surrogate(model: &SurrogateModel, space: &ParameterSpace) -> Vec<f64> {
    (0..space.len())
        .map(|i| {
            let row: Vec<f64> = space.drifts.row(i).iter().copied().collect();
            model.predict(&row)
        })
        .collect()
}

/// Indices of the `count` largest scores, skipping `excluded`; ties go to the lower index.
pub fn top_candidates(scores: &[f64], count: usize, excluded: &BTreeSet<usize>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|i| !excluded.contains(i)).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

/// `log e = γ log ε + log τ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorModel {
    pub gamma: f64,
    pub log_tau: f64,
    /// `(relative error, residual estimate)` pairs.
    pub points: Vec<(f64, f64)>,
}

impl ErrorModel {
    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn predict(&self, estimate: f64) -> f64 {
        (self.gamma * estimate.ln() + self.log_tau).exp()
    }
}

pub fn fit_error_model(points: &[(f64, f64)]) -> Result<ErrorModel> {
    if points.len() < 2 {
        return Err(Error::InvalidInput("error model needs at least two points".into()));
    }
    for &(error, estimate) in points {
        if !(error > 0.0 && estimate > 0.0) {
            return Err(Error::NonPositiveError { error, estimate });
        }
    }
    let n = points.len();
    let design = DMatrix::from_fn(n, 2, |i, j| if j == 0 { points[i].1.ln() } else { 1.0 });
    let rhs = DVector::from_iterator(n, points.iter().map(|p| p.0.ln()));
    let coef = least_squares(&design, &rhs)?;
    Ok(ErrorModel {
        gamma: coef[0],
        log_tau: coef[1],
        points: points.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Classical,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Tolerance,
    MaxIterations,
    /// Every candidate already contributes snapshots.
    Stagnated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Greedy loop counter, starting at 2 (the first basis comes from group 0).
    pub iteration: usize,
    pub chosen: usize,
    pub max_residual: f64,
    pub mean_residual: f64,
    /// Basis dimension used for this iteration's residuals.
    pub dim: usize,
    pub candidates: Vec<usize>,
    pub residuals: Vec<f64>,
    /// Error-model prediction for `max_residual` (adaptive only).
    pub estimated_error: Option<f64>,
    /// `(e, ε)` before and after the basis update (adaptive only).
    pub before: Option<(f64, f64)>,
    pub after: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyTrace {
    pub strategy: Strategy,
    pub seed: u64,
    pub records: Vec<IterationRecord>,
    pub terminated: TerminationReason,
    pub sources: Vec<usize>,
    pub final_dim: usize,
}

impl GreedyTrace {
    pub fn max_residuals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.max_residual).collect()
    }
}

#[derive(Debug, Clone)]
pub struct GreedyOutcome {
    pub basis: ReducedBasis,
    pub trace: GreedyTrace,
    pub error_model: Option<ErrorModel>,
}

/// Everything a greedy run needs besides the parameter space.
pub struct GreedyContext<'a> {
    pub problem: &'a FdmProblem,
    pub config: &'a GreedyConfig,
    pub energy_level: f64,
    pub seed: u64,
}

impl GreedyContext<'_> {
    fn capture(&self) -> Vec<usize> {
        let dt_days = self.problem.schedule.dt * crate::market_data::DAYS_PER_YEAR;
        self.problem.schedule.checkpoints(self.config.snapshots.stride(dt_days))
    }

    fn residual_options(&self) -> ResidualOptions {
        ResidualOptions {
            mode: self.config.residual_mode,
            aggregation: self.config.residual_aggregation,
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// State shared by both strategies: snapshot matrix and current basis.
struct Trainer<'a, 'b> {
    ctx: &'b GreedyContext<'a>,
    space: &'b ParameterSpace,
    capture: Vec<usize>,
    snapshots: SnapshotMatrix,
    basis: ReducedBasis,
}

impl<'a, 'b> Trainer<'a, 'b> {
    fn start(ctx: &'b GreedyContext<'a>, space: &'b ParameterSpace) -> Result<Self> {
        let capture = ctx.capture();
        let mut snapshots = SnapshotMatrix::new(ctx.problem.size(), capture.len());
        let first = ctx.problem.solve(&space.group(0), &capture)?;
        snapshots.push(&first)?;
        let basis = build_basis(&snapshots, ctx.energy_level)?;
        Ok(Self {
            ctx,
            space,
            capture,
            snapshots,
            basis,
        })
    }

    fn residuals(&self, indices: &[usize]) -> Result<Vec<f64>> {
        let solver = RomSolver::new(self.ctx.problem, &self.basis)?;
        let opts = self.ctx.residual_options();
        indices
            .par_iter()
            .map(|&i| {
                let sol = solver.solve(&self.space.group(i), &self.capture, Some(opts))?;
                Ok(sol.residual.map_or(0.0, |r| r.estimate))
            })
            .collect()
    }

    /// `(relative error, residual)` for `hdm` under the current basis.
    fn error_pair(&self, index: usize, hdm: &DMatrix<f64>) -> Result<(f64, f64)> {
        let solver = RomSolver::new(self.ctx.problem, &self.basis)?;
        let sol = solver.solve(
            &self.space.group(index),
            &self.capture,
            Some(self.ctx.residual_options()),
        )?;
        let e = relative_error(hdm, &sol.lift(&self.basis));
        Ok((e, sol.residual.map_or(0.0, |r| r.estimate)))
    }

    fn sampled(&self) -> &[usize] {
        &self.snapshots.sources
    }

    fn add(&mut self, index: usize) -> Result<DMatrix<f64>> {
        let sol = self.ctx.problem.solve(&self.space.group(index), &self.capture)?;
        self.snapshots.push(&sol)?;
        self.basis = build_basis(&self.snapshots, self.ctx.energy_level)?;
        Ok(sol.values)
    }

    fn finish(
        self,
        strategy: Strategy,
        records: Vec<IterationRecord>,
        terminated: TerminationReason,
        error_model: Option<ErrorModel>,
    ) -> GreedyOutcome {
        let mut basis = self.basis;
        basis.sources = self.snapshots.sources.clone();
        let trace = GreedyTrace {
            strategy,
            seed: self.ctx.seed,
            records,
            terminated,
            sources: self.snapshots.sources,
            final_dim: basis.dim(),
        };
        GreedyOutcome {
            basis,
            trace,
            error_model,
        }
    }
}

/// Position of the largest value; ties resolve to the lowest parameter index.
fn argmax(indices: &[usize], values: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..indices.len() {
        let better = values[k] > values[best] || (values[k] == values[best] && indices[k] < indices[best]);
        if better {
            best = k;
        }
    }
    best
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

pub fn classical_greedy(space: &ParameterSpace, ctx: &GreedyContext) -> Result<GreedyOutcome> {
    let cfg = ctx.config;
    let s = space.len();
    let mut trainer = Trainer::start(ctx, space)?;
    let size = cfg.c.min(s);
    let mut candidates: Vec<usize> = sample(&mut ctx.rng(0), s, size).into_vec();
    candidates.sort_unstable();
    let mut records = Vec::new();
    let mut terminated = TerminationReason::MaxIterations;
    for iteration in 2..=cfg.i_max.max(2) {
        if iteration > cfg.i_max {
            break;
        }
        // A group is never solved by the HDM twice.
        let pool: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|i| !trainer.sampled().contains(i))
            .collect();
        if pool.is_empty() {
            terminated = TerminationReason::Stagnated;
            break;
        }
        let residuals = trainer.residuals(&pool)?;
        let best = argmax(&pool, &residuals);
        let chosen = pool[best];
        records.push(IterationRecord {
            iteration,
            chosen,
            max_residual: residuals[best],
            mean_residual: mean(&residuals),
            dim: trainer.basis.dim(),
            candidates: pool.clone(),
            residuals: residuals.clone(),
            estimated_error: None,
            before: None,
            after: None,
        });
        if residuals[best] <= cfg.eps_tol {
            terminated = TerminationReason::Tolerance;
            break;
        }
        trainer.add(chosen)?;
    }
    Ok(trainer.finish(Strategy::Classical, records, terminated, None))
}

pub fn adaptive_greedy(space: &ParameterSpace, ctx: &GreedyContext) -> Result<GreedyOutcome> {
    let cfg = ctx.config;
    let s = space.len();
    if s < cfg.c {
        return Err(Error::InsufficientSpace {
            available: s,
            required: cfg.c,
        });
    }
    let mut trainer = Trainer::start(ctx, space)?;
    let mut records = Vec::new();
    let mut terminated = TerminationReason::MaxIterations;
    let mut error_points: Vec<(f64, f64)> = Vec::new();
    let mut error_model: Option<ErrorModel> = None;

    for iteration in 2..=cfg.i_max {
        let free: Vec<usize> = (0..s).filter(|i| !trainer.sampled().contains(i)).collect();
        if free.is_empty() {
            terminated = TerminationReason::Stagnated;
            break;
        }
        let mut candidates: Vec<usize> = sample(&mut ctx.rng(iteration as u64), free.len(), cfg.c_0.min(free.len()))
            .iter()
            .map(|k| free[k])
            .collect();
        candidates.sort_unstable();
        let mut residuals = trainer.residuals(&candidates)?;
        while candidates.len() < cfg.c && candidates.len() >= 2 {
            let design = DMatrix::from_fn(candidates.len(), space.grid.len(), |i, j| {
                space.drifts[(candidates[i], j)]
            });
            let model = fit_pcr_surrogate(&design, &residuals, cfg.pcr_components)?;
            let scores = evaluate_surrogate(&model, space);
            let mut excluded: BTreeSet<usize> = candidates.iter().copied().collect();
            excluded.extend(trainer.sampled().iter().copied());
            let picks = top_candidates(&scores, cfg.c_k.min(cfg.c - candidates.len()), &excluded);
            if picks.is_empty() {
                break;
            }
            let fresh = trainer.residuals(&picks)?;
            candidates.extend(picks);
            residuals.extend(fresh);
        }
        let best = argmax(&candidates, &residuals);
        let chosen = candidates[best];
        let max_residual = residuals[best];
        let estimated = error_model.as_ref().map(|m| m.predict(max_residual));
        let mut record = IterationRecord {
            iteration,
            chosen,
            max_residual,
            mean_residual: mean(&residuals),
            dim: trainer.basis.dim(),
            candidates,
            residuals,
            estimated_error: estimated,
            before: None,
            after: None,
        };
        if iteration > 2 {
            if let Some(e) = estimated {
                if e <= cfg.e_max_tol {
                    records.push(record);
                    terminated = TerminationReason::Tolerance;
                    break;
                }
            }
        }
        let hdm = ctx.problem.solve(&space.group(chosen), &trainer.capture)?.values;
        let before = trainer.error_pair(chosen, &hdm)?;
        trainer.add(chosen)?;
        let after = trainer.error_pair(chosen, &hdm)?;
        for pair in [before, after] {
            if pair.0 > 0.0 && pair.1 > 0.0 {
                error_points.push(pair);
            }
        }
        if error_points.len() >= 2 {
            error_model = Some(fit_error_model(&error_points)?);
        }
        record.before = Some(before);
        record.after = Some(after);
        records.push(record);
    }
    Ok(trainer.finish(Strategy::Adaptive, records, terminated, error_model))
}
