//! Proper orthogonal decomposition bases and Galerkin-projected reduced solves.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdm::{FdmProblem, HdmSolution};
use crate::linalg::{thin_svd, Svd, Tridiagonal};
use crate::params::ParameterGroup;

/// Which HDM states become snapshot columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotMode {
    /// Every 30 days plus the final state.
    #[default]
    Monthly,
    /// Every time step.
    Full,
}

impl SnapshotMode {
    pub fn stride(self, dt_days: f64) -> usize {
        match self {
            SnapshotMode::Monthly => ((30.0 / dt_days).round() as usize).max(1),
            SnapshotMode::Full => 1,
        }
    }
}

/// How per-step relative residuals are combined into one estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualAggregation {
    #[default]
    Max,
    Rms,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// Norms evaluated through a small triangular factor of `[AQ, BQ]`.
    #[default]
    Compressed,
    /// Full-length residual vectors; also reports `max |QᵀR|`.
    Explicit,
}

pub fn truncated_svd(m: &DMatrix<f64>) -> Result<Svd> {
    thin_svd(m)
}

/// Smallest `d` whose cumulative energy, in percent, exceeds `energy_level`.
/// Falls back to the count of nonzero energies when the level is never exceeded.
pub fn select_dimension(energies: &[f64], energy_level: f64) -> usize {
    let mut cumulative = 0.0;
    for (j, e) in energies.iter().enumerate() {
        cumulative += e;
        if cumulative * 100.0 > energy_level {
            return j + 1;
        }
    }
    energies.iter().filter(|&&e| e > 0.0).count().max(1)
}

#[derive(Debug, Clone)]
pub struct SnapshotMatrix {
    pub columns: DMatrix<f64>,
    pub sources: Vec<usize>,
    per_source: usize,
}

impl SnapshotMatrix {
    pub fn new(rows: usize, per_source: usize) -> Self {
        Self {
            columns: DMatrix::zeros(rows, 0),
            sources: Vec::new(),
            per_source,
        }
    }

    pub fn push(&mut self, solution: &HdmSolution) -> Result<()> {
        if self.sources.contains(&solution.parameter) {
            return Err(Error::InvalidInput(format!(
                "parameter group {} already contributes snapshots",
                solution.parameter
            )));
        }
        let v = &solution.values;
        if v.nrows() != self.columns.nrows() || v.ncols() != self.per_source {
            return Err(Error::Dimension(format!(
                "snapshot block {}×{} does not fit {}×{} per source",
                v.nrows(),
                v.ncols(),
                self.columns.nrows(),
                self.per_source
            )));
        }
        let old = self.columns.ncols();
        let mut grown = DMatrix::zeros(v.nrows(), old + v.ncols());
        grown.columns_mut(0, old).copy_from(&self.columns);
        grown.columns_mut(old, v.ncols()).copy_from(v);
        self.columns = grown;
        self.sources.push(solution.parameter);
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.columns.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedBasis {
    /// `M × d`, orthonormal columns.
    pub q: DMatrix<f64>,
    /// Relative energies of all modes, descending.
    pub energies: Vec<f64>,
    pub energy_level: f64,
    pub sources: Vec<usize>,
    /// Free-form provenance written into the file header.
    pub provenance: BTreeMap<String, String>,
}

impl ReducedBasis {
    pub fn dim(&self) -> usize {
        self.q.ncols()
    }

    pub fn size(&self) -> usize {
        self.q.nrows()
    }

    pub fn project(&self, v: &[f64]) -> DVector<f64> {
        self.q.tr_mul(&DVector::from_column_slice(v))
    }
}

pub fn build_basis(snapshots: &SnapshotMatrix, energy_level: f64) -> Result<ReducedBasis> {
    if !(energy_level > 0.0 && energy_level <= 100.0) {
        return Err(Error::InvalidInput(format!(
            "energy level {energy_level} outside (0, 100]"
        )));
    }
    let svd = truncated_svd(&snapshots.columns)?;
    let total: f64 = svd.singular_values.sum();
    if !(total > 0.0) {
        return Err(Error::RankDeficient);
    }
    let energies: Vec<f64> = svd.singular_values.iter().map(|s| s / total).collect();
    let d = select_dimension(&energies, energy_level).min(svd.u.ncols());
    Ok(ReducedBasis {
        q: svd.u.columns(0, d).into_owned(),
        energies,
        energy_level,
        sources: snapshots.sources.clone(),
        provenance: BTreeMap::new(),
    })
}

/// `(QᵀAQ, QᵀBQ)`.
pub fn assemble_rom(a: &Tridiagonal, b: &Tridiagonal, q: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    (q.tr_mul(&a.mul_dense(q)), q.tr_mul(&b.mul_dense(q)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualOptions {
    pub mode: ResidualMode,
    pub aggregation: ResidualAggregation,
}

impl Default for ResidualOptions {
    fn default() -> Self {
        Self {
            mode: ResidualMode::Compressed,
            aggregation: ResidualAggregation::Max,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSummary {
    /// Aggregated relative residual.
    pub estimate: f64,
    pub steps: usize,
    /// Largest `|QᵀR|` entry seen; explicit mode only.
    pub max_orthogonality: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RomSolution {
    pub steps: Vec<usize>,
    /// `d × checkpoints`.
    pub reduced: DMatrix<f64>,
    pub residual: Option<ResidualSummary>,
    pub parameter: usize,
}

impl RomSolution {
    /// `Q V_d` at every stored checkpoint.
    pub fn lift(&self, basis: &ReducedBasis) -> DMatrix<f64> {
        &basis.q * &self.reduced
    }

    pub fn column_at(&self, step: usize) -> Option<usize> {
        self.steps.iter().position(|&s| s == step)
    }

    /// Lifted value at `rate` for the state stored at `step`, interpolating only two rows of `Q`.
    pub fn value_at(&self, basis: &ReducedBasis, grid: &crate::fdm::RateGrid, step: usize, rate: f64) -> Result<f64> {
        let k = self
            .column_at(step)
            .ok_or_else(|| Error::InvalidInput(format!("step {step} was not stored")))?;
        let m = grid.len();
        let pos = ((rate - grid.lower) / grid.dx).clamp(0.0, (m - 1) as f64);
        let i = (pos.floor() as usize).min(m - 2);
        let row = |r: usize| basis.q.row(r).dot(&self.reduced.column(k).transpose());
        let pair = [row(i), row(i + 1)];
        grid.interpolate_pair(i, pair, rate)
    }
}

/// Frobenius-norm relative error `||V - V̄|| / ||V||`.
pub fn relative_error(reference: &DMatrix<f64>, approx: &DMatrix<f64>) -> f64 {
    let denom = reference.norm();
    if denom == 0.0 {
        return (reference - approx).norm();
    }
    (reference - approx).norm() / denom
}

/// Reduced pieces for one drift value.
struct Projected {
    a_d: DMatrix<f64>,
    b_d: DMatrix<f64>,
    /// `A Q` and `B Q`, kept only when residuals are requested.
    aq: Option<DMatrix<f64>>,
    bq: Option<DMatrix<f64>>,
}

/// Pieces for one step type `(a_now, a_next)`.
struct StepOperator {
    propagator: DMatrix<f64>,
    /// Upper-triangular factor of `[A Q, B Q]`; compressed residual mode.
    factor: Option<DMatrix<f64>>,
    aq: Option<DMatrix<f64>>,
    bq: Option<DMatrix<f64>>,
}

/// Reduced-order solver for one problem and one basis, shared across parameter groups.
pub struct RomSolver<'a> {
    problem: &'a FdmProblem,
    basis: &'a ReducedBasis,
    /// `Qᵀ Q` restricted to interior rows.
    interior_gram: DMatrix<f64>,
    /// `Qᵀ` times the Neumann rows of `A`, times `Q`.
    boundary: DMatrix<f64>,
    /// `Q` with boundary rows zeroed.
    q_interior: DMatrix<f64>,
    coupon: DVector<f64>,
    initial: DVector<f64>,
}

impl<'a> RomSolver<'a> {
    pub fn new(problem: &'a FdmProblem, basis: &'a ReducedBasis) -> Result<Self> {
        let m = problem.size();
        if basis.size() != m {
            return Err(Error::Dimension(format!(
                "basis has {} rows, grid has {m} points",
                basis.size()
            )));
        }
        let q = &basis.q;
        let d = q.ncols();
        let first = q.row(0).transpose();
        let second = q.row(1).transpose();
        let last = q.row(m - 1).transpose();
        let before_last = q.row(m - 2).transpose();
        let interior_gram = q.tr_mul(q) - &first * first.transpose() - &last * last.transpose();
        let boundary = &first * (&second - &first).transpose() + &last * (&before_last - &last).transpose();
        let mut q_interior = q.clone();
        q_interior.row_mut(0).fill(0.0);
        q_interior.row_mut(m - 1).fill(0.0);
        debug_assert_eq!(interior_gram.shape(), (d, d));
        Ok(Self {
            problem,
            basis,
            interior_gram,
            boundary,
            q_interior,
            coupon: basis.project(&problem.coupon_vector()),
            initial: basis.project(&problem.initial_condition()),
        })
    }

    fn project(&self, b: f64, sigma: f64, a: f64, keep_full: bool) -> Projected {
        let p = self.problem;
        let m = p.size();
        let mut l = crate::fdm::spatial_operator(&p.grid, b, sigma, a);
        for i in [0, m - 1] {
            l.lower[i] = 0.0;
            l.diag[i] = 0.0;
            l.upper[i] = 0.0;
        }
        let lq = l.mul_dense(&self.basis.q);
        let reduced = self.basis.q.tr_mul(&lq);
        let dt = p.schedule.dt;
        let a_d = &self.interior_gram - &reduced * (p.theta * dt) + &self.boundary;
        let b_d = &self.interior_gram + &reduced * ((1.0 - p.theta) * dt);
        let (aq, bq) = if keep_full {
            let q = &self.basis.q;
            let mut aq = &self.q_interior - &lq * (p.theta * dt);
            let row0 = q.row(1) - q.row(0);
            let row_last = q.row(m - 2) - q.row(m - 1);
            aq.row_mut(0).copy_from(&row0);
            aq.row_mut(m - 1).copy_from(&row_last);
            let bq = &self.q_interior + &lq * ((1.0 - p.theta) * dt);
            (Some(aq), Some(bq))
        } else {
            (None, None)
        };
        Projected { a_d, b_d, aq, bq }
    }

    /// Marches the reduced system, storing states at `capture` steps.
    pub fn solve(
        &self,
        rho: &ParameterGroup,
        capture: &[usize],
        residual: Option<ResidualOptions>,
    ) -> Result<RomSolution> {
        let p = self.problem;
        let d = self.basis.dim();
        let times = rho.drift.grid.times();
        let keep_full = residual.is_some();
        let mut by_value: HashMap<u64, Projected> = HashMap::new();
        let mut by_step: HashMap<(u64, u64), StepOperator> = HashMap::new();

        let mut v = self.initial.clone();
        let mut next = DVector::zeros(d);
        let mut reduced = DMatrix::zeros(d, capture.len());
        let mut k = 0;
        while k < capture.len() && capture[k] == 0 {
            reduced.column_mut(k).copy_from(&v);
            k += 1;
        }
        let mut worst = 0.0f64;
        let mut sum_sq = 0.0;
        let mut counted = 0usize;
        let mut orthogonality = 0.0f64;
        let mut stacked = DVector::zeros(2 * d);

        for n in 0..p.schedule.steps {
            let plan = p.step_plan(&rho.drift.values, times, n);
            let key = (plan.a_now.to_bits(), plan.a_next.to_bits());
            if !by_step.contains_key(&key) {
                for a in [plan.a_now, plan.a_next] {
                    by_value
                        .entry(a.to_bits())
                        .or_insert_with(|| self.project(rho.b, rho.sigma, a, keep_full));
                }
                let now = &by_value[&key.0];
                let nxt = &by_value[&key.1];
                let inverse = nxt.a_d.clone().try_inverse().ok_or(Error::SolveFailure { row: 0 })?;
                let propagator = inverse * &now.b_d;
                let (aq, bq) = (nxt.aq.clone(), now.bq.clone());
                let factor = match (residual.map(|r| r.mode), &aq, &bq) {
                    (Some(ResidualMode::Compressed), Some(aq), Some(bq)) => {
                        let mut joined = DMatrix::zeros(aq.nrows(), 2 * d);
                        joined.columns_mut(0, d).copy_from(aq);
                        joined.columns_mut(d, d).copy_from(bq);
                        Some(joined.qr().r())
                    }
                    _ => None,
                };
                by_step.insert(
                    key,
                    StepOperator {
                        propagator,
                        factor,
                        aq,
                        bq,
                    },
                );
            }
            let op = &by_step[&key];
            next.gemv(1.0, &op.propagator, &v, 0.0);

            if let Some(opts) = residual {
                let (num, den) = match opts.mode {
                    ResidualMode::Compressed => {
                        let t = op.factor.as_ref().unwrap();
                        stacked.rows_mut(0, d).copy_from(&next);
                        stacked.rows_mut(d, d).copy_from(&(-&v));
                        let num = (t * &stacked).norm();
                        let den = (t.columns(d, d) * &v).norm();
                        (num, den)
                    }
                    ResidualMode::Explicit => {
                        let bqv = op.bq.as_ref().unwrap() * &v;
                        let r = op.aq.as_ref().unwrap() * &next - &bqv;
                        let qtr = self.basis.q.tr_mul(&r);
                        orthogonality = orthogonality.max(qtr.amax());
                        (r.norm(), bqv.norm())
                    }
                };
                if den > 0.0 {
                    let eps = num / den;
                    worst = worst.max(eps);
                    sum_sq += eps * eps;
                    counted += 1;
                }
            }

            if plan.coupon {
                next += &self.coupon;
            }
            std::mem::swap(&mut v, &mut next);
            while k < capture.len() && capture[k] == n + 1 {
                reduced.column_mut(k).copy_from(&v);
                k += 1;
            }
        }
        if k != capture.len() {
            return Err(Error::ScheduleMismatch(format!(
                "checkpoint {} lies past the last step",
                capture[k]
            )));
        }
        if reduced.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("reduced solution is not finite".into()));
        }
        let residual = residual.map(|opts| ResidualSummary {
            estimate: match opts.aggregation {
                ResidualAggregation::Max => worst,
                ResidualAggregation::Rms => {
                    if counted == 0 {
                        0.0
                    } else {
                        (sum_sq / counted as f64).sqrt()
                    }
                }
            },
            steps: counted,
            max_orthogonality: (opts.mode == ResidualMode::Explicit).then_some(orthogonality),
        });
        Ok(RomSolution {
            steps: capture.to_vec(),
            reduced,
            residual,
            parameter: rho.index,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
struct BasisHeader {
    #[serde(rename = "M")]
    m: usize,
    d: usize,
    #[serde(rename = "EL")]
    energy_level: f64,
    energies: Vec<f64>,
    sources: Vec<usize>,
    #[serde(default)]
    provenance: BTreeMap<String, String>,
}

/// One JSON header line, then `M·d` little-endian `f64` values in column-major order.
pub fn write_basis<W: Write>(basis: &ReducedBasis, mut writer: W) -> Result<()> {
    let header = BasisHeader {
        m: basis.size(),
        d: basis.dim(),
        energy_level: basis.energy_level,
        energies: basis.energies.clone(),
        sources: basis.sources.clone(),
        provenance: basis.provenance.clone(),
    };
    let io = |e| Error::io("<basis>", e);
    writer
        .write_all(serde_json::to_string(&header)?.as_bytes())
        .map_err(io)?;
    writer.write_all(b"\n").map_err(io)?;
    let mut payload = Vec::with_capacity(8 * basis.q.len());
    for x in basis.q.iter() {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    writer.write_all(&payload).map_err(io)?;
    writer.flush().map_err(io)
}

pub fn read_basis<R: Read>(reader: R) -> Result<ReducedBasis> {
    let mut reader = BufReader::new(reader);
    let mut line = Vec::new();
    reader
        .read_until(b'\n', &mut line)
        .map_err(|e| Error::io("<basis>", e))?;
    let header: BasisHeader = serde_json::from_slice(&line)?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(|e| Error::io("<basis>", e))?;
    let count = header.m * header.d;
    if payload.len() != 8 * count {
        return Err(Error::Parse {
            line: 2,
            message: format!("basis payload has {} bytes, expected {}", payload.len(), 8 * count),
        });
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(ReducedBasis {
        q: DMatrix::from_column_slice(header.m, header.d, &values),
        energies: header.energies,
        energy_level: header.energy_level,
        sources: header.sources,
        provenance: header.provenance,
    })
}

pub fn save_basis(basis: &ReducedBasis, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_basis(basis, std::io::BufWriter::new(file))
}

pub fn load_basis(path: impl AsRef<Path>) -> Result<ReducedBasis> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_basis(file)
}
