//! Calibrated parameter groups and their on-disk form.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::calibration::{DriftVector, HullWhiteStatics, YieldConvention};
use crate::error::{Error, Result};
use crate::market_data::TenorGrid;

/// One scenario's model parameters: drift buckets plus the shared `b` and `σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGroup {
    pub drift: DriftVector,
    pub b: f64,
    pub sigma: f64,
    /// Initial short rate; also the scenario's spot rate.
    pub r0: f64,
    pub index: usize,
}

impl ParameterGroup {
    pub fn statics(&self) -> HullWhiteStatics {
        HullWhiteStatics {
            b: self.b,
            sigma: self.sigma,
            r0: self.r0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSpace {
    /// `s × m`.
    pub drifts: DMatrix<f64>,
    pub grid: TenorGrid,
    pub b: f64,
    pub sigma: f64,
    pub r0: Vec<f64>,
    pub mu: Option<f64>,
    pub yield_convention: YieldConvention,
}

impl ParameterSpace {
    pub fn new(
        drifts: DMatrix<f64>,
        grid: TenorGrid,
        b: f64,
        sigma: f64,
        r0: Vec<f64>,
        mu: Option<f64>,
        yield_convention: YieldConvention,
    ) -> Result<Self> {
        if drifts.nrows() == 0 {
            return Err(Error::InvalidInput("parameter space is empty".into()));
        }
        if drifts.ncols() != grid.len() || r0.len() != drifts.nrows() {
            return Err(Error::Dimension(format!(
                "{}×{} drifts, {} tenors, {} initial rates",
                drifts.nrows(),
                drifts.ncols(),
                grid.len(),
                r0.len()
            )));
        }
        if drifts.iter().chain(&r0).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("parameter space has non-finite entries".into()));
        }
        HullWhiteStatics::new(b, sigma, 0.0)?;
        Ok(Self {
            drifts,
            grid,
            b,
            sigma,
            r0,
            mu,
            yield_convention,
        })
    }

    pub fn len(&self) -> usize {
        self.drifts.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.drifts.nrows() == 0
    }

    pub fn group(&self, index: usize) -> ParameterGroup {
        ParameterGroup {
            drift: DriftVector {
                values: self.drifts.row(index).iter().copied().collect(),
                grid: self.grid.clone(),
            },
            b: self.b,
            sigma: self.sigma,
            r0: self.r0[index],
            index,
        }
    }

    /// Rows `indices` in order, keeping the shared statics.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let m = self.grid.len();
        let drifts = DMatrix::from_fn(indices.len(), m, |i, j| self.drifts[(indices[i], j)]);
        Self {
            drifts,
            r0: indices.iter().map(|&i| self.r0[i]).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSidecar {
    pub b: f64,
    pub sigma: f64,
    pub mu: Option<f64>,
    pub yield_convention: YieldConvention,
}

pub fn write_parameters<W: Write>(space: &ParameterSpace, writer: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    let mut header = vec!["scenario".to_string(), "r0".to_string()];
    header.extend(space.grid.labels().iter().cloned());
    csv.write_record(&header)?;
    for i in 0..space.len() {
        let mut row = vec![i.to_string(), space.r0[i].to_string()];
        row.extend(space.drifts.row(i).iter().map(|v| v.to_string()));
        csv.write_record(&row)?;
    }
    csv.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_parameters<R: Read>(reader: R, sidecar: &ParameterSidecar) -> Result<ParameterSpace> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = csv.records();
    let header = records.next().ok_or(Error::Parse {
        line: 1,
        message: "empty parameter file".into(),
    })??;
    if header.len() < 3 || &header[0] != "scenario" || &header[1] != "r0" {
        return Err(Error::Parse {
            line: 1,
            message: "header must start with `scenario,r0`".into(),
        });
    }
    let labels: Vec<&str> = header.iter().skip(2).collect();
    let grid = TenorGrid::from_labels(&labels)?;
    let m = grid.len();
    let mut values = Vec::new();
    let mut r0 = Vec::new();
    for (idx, rec) in records.enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if rec.len() != m + 2 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", m + 2, rec.len()),
            });
        }
        for column in 1..m + 2 {
            let cell = &rec[column];
            if cell.is_empty() {
                return Err(Error::MissingValue {
                    line,
                    column: column + 1,
                });
            }
            let v = cell.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("bad number `{cell}`"),
            })?;
            if column == 1 {
                r0.push(v);
            } else {
                values.push(v);
            }
        }
    }
    let n = r0.len();
    ParameterSpace::new(
        DMatrix::from_row_slice(n, m, &values),
        grid,
        sidecar.b,
        sidecar.sigma,
        r0,
        sidecar.mu,
        sidecar.yield_convention,
    )
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

pub fn save_parameters(space: &ParameterSpace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_parameters(space, file)?;
    let side = ParameterSidecar {
        b: space.b,
        sigma: space.sigma,
        mu: space.mu,
        yield_convention: space.yield_convention,
    };
    let side_path = sidecar_path(path);
    std::fs::write(&side_path, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(side_path, e))
}

pub fn load_parameters(path: impl AsRef<Path>) -> Result<ParameterSpace> {
    let path = path.as_ref();
    let side_path = sidecar_path(path);
    let text = std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let sidecar: ParameterSidecar = serde_json::from_str(&text)?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_parameters(BufReader::new(file), &sidecar)
}
