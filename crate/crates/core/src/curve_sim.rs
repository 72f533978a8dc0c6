//! Yield-curve scenario generation by PCA-filtered bootstrapping of log returns.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::thin_svd;
use crate::market_data::{RateHistory, TenorGrid};

/// How per-period returns are formed from consecutive shifted rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnFormula {
    /// `ln(d[i+1]) - ln(d[i])`.
    #[default]
    LogDifference,
    /// `ln(d[i+1]) / ln(d[i])`, kept for comparison runs.
    RatioOfLogs,
}

/// Mean-corrected returns, `(n-1) × m`.
#[derive(Debug, Clone)]
pub struct ReturnMatrix {
    pub values: DMatrix<f64>,
    pub column_means: DVector<f64>,
}

pub fn log_returns(shifted: &RateHistory, formula: ReturnFormula) -> Result<ReturnMatrix> {
    let rates = &shifted.rates;
    let (n, m) = rates.shape();
    if n < 2 {
        return Err(Error::InvalidInput("need at least two observations".into()));
    }
    for i in 0..n {
        for j in 0..m {
            let value = rates[(i, j)];
            if !(value > 0.0) {
                return Err(Error::NonPositiveRate {
                    row: i,
                    column: j,
                    value,
                });
            }
        }
    }
    let mut values = DMatrix::zeros(n - 1, m);
    for j in 0..m {
        for i in 0..n - 1 {
            let (prev, next) = (rates[(i, j)], rates[(i + 1, j)]);
            values[(i, j)] = match formula {
                ReturnFormula::LogDifference => next.ln() - prev.ln(),
                ReturnFormula::RatioOfLogs => {
                    let denom = prev.ln();
                    if denom == 0.0 {
                        return Err(Error::Domain(format!(
                            "ratio of logarithms undefined at row {i}, column {j} (rate = 1)"
                        )));
                    }
                    next.ln() / denom
                }
            };
        }
    }
    let column_means = DVector::from_iterator(m, values.column_iter().map(|c| c.mean()));
    for j in 0..m {
        let mu = column_means[j];
        values.column_mut(j).add_scalar_mut(-mu);
    }
    Ok(ReturnMatrix { values, column_means })
}

#[derive(Debug, Clone)]
pub struct SimulationBasis {
    /// Length `m`, descending; zero-padded when there are fewer returns than tenors.
    pub singular_values: DVector<f64>,
    /// `m × m`, orthonormal columns.
    pub right_vectors: DMatrix<f64>,
    pub p_sim: usize,
    /// Relative energies `Σ_i / ΣΣ`.
    pub energies: Vec<f64>,
    /// Returns projected onto the first `p_sim` right vectors, `(n-1) × m`.
    pub projected: DMatrix<f64>,
}

impl SimulationBasis {
    /// Project-then-reconstruct through the retained right vectors.
    pub fn project(&self, values: &DMatrix<f64>) -> DMatrix<f64> {
        let psi = self.right_vectors.columns(0, self.p_sim);
        (values * psi) * psi.transpose()
    }
}

/// Smallest count whose cumulative relative energy reaches `threshold` (a fraction).
pub fn components_for_energy(energies: &[f64], threshold: f64) -> usize {
    let mut cumulative = 0.0;
    for (i, e) in energies.iter().enumerate() {
        cumulative += e;
        if cumulative >= threshold - 1e-12 {
            return i + 1;
        }
    }
    energies.len().max(1)
}

/// SVD of the corrected returns and the filtered return matrix `M_R`.
///
/// `p_sim = None` keeps the smallest number of components holding 99% of the energy.
pub fn build_simulation_basis(returns: &ReturnMatrix, p_sim: Option<usize>) -> Result<SimulationBasis> {
    let (rows, m) = returns.values.shape();
    if let Some(p) = p_sim {
        if p < 1 || p > m {
            return Err(Error::InvalidInput(format!("p_sim must lie in [1, {m}], got {p}")));
        }
    }
    // Zero rows leave the right singular vectors unchanged and give a full m × m basis.
    let padded = if rows < m {
        let mut p = DMatrix::zeros(m, m);
        p.rows_mut(0, rows).copy_from(&returns.values);
        p
    } else {
        returns.values.clone()
    };
    let svd = thin_svd(&padded)?;
    let total: f64 = svd.singular_values.sum();
    if !(total > 0.0) {
        return Err(Error::RankDeficient);
    }
    let energies: Vec<f64> = svd.singular_values.iter().map(|s| s / total).collect();
    let p = p_sim.unwrap_or_else(|| components_for_energy(&energies, 0.99));
    let right_vectors = svd.v_t.transpose();
    let mut basis = SimulationBasis {
        singular_values: svd.singular_values,
        right_vectors,
        p_sim: p,
        energies,
        projected: DMatrix::zeros(0, 0),
    };
    basis.projected = basis.project(&returns.values);
    Ok(basis)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BootstrapSettings {
    pub count: usize,
    pub horizon_days: usize,
    pub seed: u64,
    pub forward_adjustment: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct YieldCurveSet {
    /// `s × m` simulated annualized rates.
    pub curves: DMatrix<f64>,
    pub grid: TenorGrid,
    pub seed: u64,
    pub gamma: f64,
    pub p_sim: usize,
    pub energies: Vec<f64>,
}

impl YieldCurveSet {
    pub fn len(&self) -> usize {
        self.curves.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.nrows() == 0
    }

    pub fn curve(&self, i: usize) -> Vec<f64> {
        self.curves.row(i).iter().copied().collect()
    }

    /// Keeps the first `count` tenors.
    pub fn truncated(&self, count: usize) -> Result<Self> {
        let grid = self.grid.truncated(count)?;
        Ok(Self {
            curves: self.curves.columns(0, count).into_owned(),
            grid,
            ..self.clone()
        })
    }
}

/// Forward rate between consecutive tenors of `curve`, with `t0 = 0`.
///
/// Tenor `j` uses `(t1, t2) = (T[j-1], T[j])`, and `t1 = 0` for the first tenor.
pub fn forward_adjustments(curve: &[f64], times: &[f64]) -> Vec<f64> {
    (0..curve.len())
        .map(|j| {
            let (t2, r2) = (times[j], curve[j]);
            let (t1, r1) = if j == 0 {
                (0.0, 0.0)
            } else {
                (times[j - 1], curve[j - 1])
            };
            if t2 - t1 <= 0.0 {
                r2
            } else {
                (r2 * t2 - r1 * t1) / (t2 - t1)
            }
        })
        .collect()
}

/// Draws `settings.count` curves. Trial `i` reads stream `i` of the seeded generator,
/// so trials are independent of evaluation order.
pub fn bootstrap_curves(
    shifted: &RateHistory,
    gamma: f64,
    basis: &SimulationBasis,
    settings: &BootstrapSettings,
) -> Result<YieldCurveSet> {
    if settings.count < 1 || settings.horizon_days < 1 {
        return Err(Error::InvalidInput(
            "bootstrap count and horizon must be at least 1".into(),
        ));
    }
    let m = shifted.tenors();
    let rows = basis.projected.nrows();
    if basis.projected.ncols() != m || rows == 0 {
        return Err(Error::Dimension("projected returns do not match the history".into()));
    }
    let last_shifted = shifted.last_curve();
    let last_observed: Vec<f64> = last_shifted.iter().map(|r| r - gamma).collect();
    let forward = if settings.forward_adjustment {
        forward_adjustments(&last_observed, shifted.grid.times())
    } else {
        vec![0.0; m]
    };
    // Row-major copy for cache-friendly accumulation.
    let table: Vec<f64> = (0..rows)
        .flat_map(|i| basis.projected.row(i).iter().copied().collect::<Vec<_>>())
        .collect();

    let trials: Vec<Vec<f64>> = (0..settings.count)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
            rng.set_stream(trial as u64);
            let mut chi = vec![0.0; m];
            for _ in 0..settings.horizon_days {
                let r = rng.random_range(0..rows);
                let row = &table[r * m..(r + 1) * m];
                for (acc, x) in chi.iter_mut().zip(row) {
                    *acc += x;
                }
            }
            (0..m)
                .map(|j| last_shifted[j] * chi[j].exp() - gamma + forward[j])
                .collect()
        })
        .collect();

    let mut curves = DMatrix::zeros(settings.count, m);
    for (i, row) in trials.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            curves[(i, j)] = *v;
        }
    }
    if curves.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("bootstrap produced non-finite rates".into()));
    }
    Ok(YieldCurveSet {
        curves,
        grid: shifted.grid.clone(),
        seed: settings.seed,
        gamma,
        p_sim: basis.p_sim,
        energies: basis.energies.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSidecar {
    pub seed: u64,
    pub gamma: f64,
    pub p_sim: usize,
    pub energies: Vec<f64>,
}

pub fn write_curves<W: Write>(set: &YieldCurveSet, writer: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    let mut header = vec!["scenario".to_string()];
    header.extend(set.grid.labels().iter().cloned());
    csv.write_record(&header)?;
    for i in 0..set.len() {
        let mut row = vec![i.to_string()];
        row.extend(set.curves.row(i).iter().map(|v| v.to_string()));
        csv.write_record(&row)?;
    }
    csv.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_curves<R: Read>(reader: R, sidecar: Option<CurveSidecar>) -> Result<YieldCurveSet> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = csv.records();
    let header = records.next().ok_or(Error::Parse {
        line: 1,
        message: "empty curve file".into(),
    })??;
    let labels: Vec<&str> = header.iter().skip(1).collect();
    let grid = TenorGrid::from_labels(&labels)?;
    let m = grid.len();
    let mut values = Vec::new();
    let mut n = 0;
    for (idx, rec) in records.enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if rec.len() != m + 1 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", m + 1, rec.len()),
            });
        }
        for column in 1..=m {
            let cell = &rec[column];
            if cell.is_empty() {
                return Err(Error::MissingValue {
                    line,
                    column: column + 1,
                });
            }
            values.push(cell.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("bad number `{cell}`"),
            })?);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Parse {
            line: 2,
            message: "no curves".into(),
        });
    }
    let side = sidecar.unwrap_or(CurveSidecar {
        seed: 0,
        gamma: 0.0,
        p_sim: 0,
        energies: vec![],
    });
    Ok(YieldCurveSet {
        curves: DMatrix::from_row_slice(n, m, &values),
        grid,
        seed: side.seed,
        gamma: side.gamma,
        p_sim: side.p_sim,
        energies: side.energies,
    })
}

pub fn sidecar_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("json")
}

pub fn save_curves(set: &YieldCurveSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_curves(set, file)?;
    let side = CurveSidecar {
        seed: set.seed,
        gamma: set.gamma,
        p_sim: set.p_sim,
        energies: set.energies.clone(),
    };
    let side_path = sidecar_path(path);
    std::fs::write(&side_path, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(side_path, e))
}

pub fn load_curves(path: impl AsRef<Path>) -> Result<YieldCurveSet> {
    let path = path.as_ref();
    let side_path = sidecar_path(path);
    let sidecar = match std::fs::read_to_string(&side_path) {
        Ok(text) => Some(serde_json::from_str(&text)?),
        Err(_) => None,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_curves(BufReader::new(file), sidecar)
}
