//! Piecewise-constant Hull-White drift from a yield curve, with constant `b` and `σ`.
//!
//! Bond prices follow `B(t,T) = exp(-r Γ(t,T) - Λ(t,T))` with
//! `Γ(t,T) = (1 - e^{-b(T-t)}) / b` and
//! `Λ(t,T) = ∫_t^T a(v) Γ(v,T) dv - σ²/2 ∫_t^T Γ(v,T)² dv`.
//! All integrals are evaluated with exact antiderivatives on each drift bucket.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curve_sim::YieldCurveSet;
use crate::error::{Error, Result};
use crate::market_data::TenorGrid;
use crate::params::ParameterSpace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HullWhiteStatics {
    pub b: f64,
    pub sigma: f64,
    pub r0: f64,
}

impl HullWhiteStatics {
    pub fn new(b: f64, sigma: f64, r0: f64) -> Result<Self> {
        if !(b > 0.0) || !(sigma >= 0.0) || !r0.is_finite() {
            return Err(Error::InvalidInput(format!(
                "need b > 0, sigma >= 0 and finite r0 (b = {b}, sigma = {sigma}, r0 = {r0})"
            )));
        }
        Ok(Self { b, sigma, r0 })
    }

    /// `Γ(t, T)` for `u = T - t`.
    pub fn gamma(&self, u: f64) -> f64 {
        -(-self.b * u).exp_m1() / self.b
    }

    /// `∫_0^u Γ(v) dv` where `Γ(v) = (1 - e^{-bv}) / b`.
    pub fn gamma_integral(&self, u: f64) -> f64 {
        let b = self.b;
        let x = b * u;
        if x.abs() < 1e-3 {
            u * u * (0.5 - x / 6.0 + x * x / 24.0 - x * x * x / 120.0)
        } else {
            (x + (-x).exp_m1()) / (b * b)
        }
    }

    /// `∫_0^u Γ(v)² dv`.
    pub fn gamma_sq_integral(&self, u: f64) -> f64 {
        let b = self.b;
        let x = b * u;
        if x.abs() < 1e-3 {
            u * u * u * (1.0 / 3.0 - x / 4.0 + 7.0 * x * x / 60.0 - x * x * x / 24.0)
        } else {
            (u + 2.0 * (-x).exp_m1() / b - (-2.0 * x).exp_m1() / (2.0 * b)) / (b * b)
        }
    }

    /// `∫_lo^hi Γ(v, T) dv` for `lo ≤ hi ≤ T`.
    fn bucket_weight(&self, lo: f64, hi: f64, maturity: f64) -> f64 {
        self.gamma_integral(maturity - lo) - self.gamma_integral(maturity - hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftVector {
    pub values: Vec<f64>,
    pub grid: TenorGrid,
}

impl DriftVector {
    pub fn new(values: Vec<f64>, grid: TenorGrid) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "{} drift values for {} tenors",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("drift values must be finite".into()));
        }
        Ok(Self { values, grid })
    }

    pub fn constant(value: f64, grid: TenorGrid) -> Self {
        Self {
            values: vec![value; grid.len()],
            grid,
        }
    }

    /// Bucket index holding `t`: bucket `i` covers `(T_{i-1}, T_i]` with `T_{-1} = 0`;
    /// times past the last tenor fall in the last bucket.
    pub fn bucket(&self, t: f64) -> usize {
        bucket_index(self.grid.times(), t)
    }

    pub fn at(&self, t: f64) -> f64 {
        self.values[self.bucket(t)]
    }
}

pub(crate) fn bucket_index(times: &[f64], t: f64) -> usize {
    const TOL: f64 = 1e-9;
    times.iter().position(|&ti| t <= ti + TOL).unwrap_or(times.len() - 1)
}

/// Bucket boundaries `[0, T_1, ..., T_m]`.
fn edges(times: &[f64]) -> Vec<f64> {
    std::iter::once(0.0).chain(times.iter().copied()).collect()
}

/// `Λ(t, T)` for the piecewise-constant drift. Buckets past the last tenor extend the last value.
pub fn lambda(statics: &HullWhiteStatics, drift: &DriftVector, t: f64, maturity: f64) -> f64 {
    let times = drift.grid.times();
    let e = edges(times);
    let mut drift_part = 0.0;
    for j in 0..times.len() {
        let lo = e[j].max(t);
        let hi = if j + 1 == times.len() {
            maturity.max(e[j + 1])
        } else {
            e[j + 1]
        };
        let hi = hi.min(maturity);
        if hi > lo {
            drift_part += drift.values[j] * statics.bucket_weight(lo, hi, maturity);
        }
    }
    drift_part - 0.5 * statics.sigma * statics.sigma * statics.gamma_sq_integral(maturity - t)
}

/// Zero-coupon bond price at short rate `statics.r0`.
pub fn bond_price_closed_form(statics: &HullWhiteStatics, drift: &DriftVector, t: f64, maturity: f64) -> Result<f64> {
    bond_price_at_rate(statics, drift, statics.r0, t, maturity)
}

pub fn bond_price_at_rate(
    statics: &HullWhiteStatics,
    drift: &DriftVector,
    rate: f64,
    t: f64,
    maturity: f64,
) -> Result<f64> {
    if t > maturity || t < 0.0 {
        return Err(Error::Domain(format!("need 0 <= t <= T, got t = {t}, T = {maturity}")));
    }
    Ok((-rate * statics.gamma(maturity - t) - lambda(statics, drift, t, maturity)).exp())
}

/// How a curve value maps to `-ln B(0, T)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YieldConvention {
    /// Continuously compounded annual rate: `-ln B(0,T) = y·T`.
    #[default]
    Annualized,
    /// Total log return: `-ln B(0,T) = y`.
    Total,
}

impl YieldConvention {
    pub fn log_discount(self, y: f64, maturity: f64) -> f64 {
        match self {
            YieldConvention::Annualized => y * maturity,
            YieldConvention::Total => y,
        }
    }
}

/// Where the initial short rate comes from.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum R0Source {
    /// The curve's own first-tenor yield.
    #[default]
    FirstTenor,
    Fixed(f64),
}

impl R0Source {
    pub fn resolve(self, curve: &[f64]) -> f64 {
        match self {
            R0Source::FirstTenor => curve[0],
            R0Source::Fixed(r) => r,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationSystem {
    /// Lower-triangular, `m × m`.
    pub e: DMatrix<f64>,
    pub f: DVector<f64>,
}

pub fn assemble_calibration_system(
    curve: &[f64],
    grid: &TenorGrid,
    statics: &HullWhiteStatics,
    convention: YieldConvention,
) -> Result<CalibrationSystem> {
    let m = grid.len();
    if curve.len() != m {
        return Err(Error::Dimension(format!(
            "curve has {} values for {m} tenors",
            curve.len()
        )));
    }
    if curve.iter().any(|y| !y.is_finite()) {
        return Err(Error::InvalidInput("curve values must be finite".into()));
    }
    let times = grid.times();
    let e_edges = edges(times);
    let mut e = DMatrix::zeros(m, m);
    let mut f = DVector::zeros(m);
    let half_var = 0.5 * statics.sigma * statics.sigma;
    for i in 0..m {
        let ti = times[i];
        for j in 0..=i {
            e[(i, j)] = statics.bucket_weight(e_edges[j], e_edges[j + 1], ti);
        }
        f[i] = convention.log_discount(curve[i], ti) - statics.r0 * statics.gamma(ti)
            + half_var * statics.gamma_sq_integral(ti);
    }
    for i in 0..m {
        let d = e[(i, i)];
        if !(d.abs() >= 1e-14) {
            return Err(Error::SingularDiagonal { index: i, value: d });
        }
    }
    Ok(CalibrationSystem { e, f })
}

impl CalibrationSystem {
    pub fn forward_substitution(&self) -> Result<DVector<f64>> {
        let m = self.f.len();
        let mut a = DVector::zeros(m);
        for i in 0..m {
            let d = self.e[(i, i)];
            if !(d.abs() >= 1e-14) {
                return Err(Error::SingularDiagonal { index: i, value: d });
            }
            let mut acc = self.f[i];
            for j in 0..i {
                acc -= self.e[(i, j)] * a[j];
            }
            a[i] = acc / d;
        }
        Ok(a)
    }

    /// Solves `(EᵀE + μI) a = EᵀF`; `μ = 0` falls back to the triangular solve.
    pub fn solve_regularized(&self, mu: f64) -> Result<DVector<f64>> {
        if !(mu >= 0.0) {
            return Err(Error::InvalidInput(format!("Tikhonov weight must be >= 0, got {mu}")));
        }
        if mu == 0.0 {
            return self.forward_substitution();
        }
        let m = self.f.len();
        let normal = self.e.transpose() * &self.e + DMatrix::identity(m, m) * mu;
        let rhs = self.e.transpose() * &self.f;
        let chol = normal.cholesky().ok_or(Error::SolveFailure { row: 0 })?;
        Ok(chol.solve(&rhs))
    }

    pub fn residual_norm(&self, a: &DVector<f64>) -> f64 {
        (&self.e * a - &self.f).norm()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.e.norm_squared()
    }
}

/// How the Tikhonov weight is chosen for each curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularization {
    Fixed(f64),
    /// `μ = factor · ||E||_F²`.
    Relative(f64),
    /// Largest `μ` with `||E a_μ − F|| ≤ tau · noise`.
    Discrepancy {
        noise: f64,
        tau: f64,
    },
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization::Relative(1e-8)
    }
}

impl Regularization {
    pub fn from_config(mu: Option<f64>) -> Self {
        mu.map_or_else(Self::default, Regularization::Fixed)
    }

    pub fn choose_mu(&self, system: &CalibrationSystem) -> Result<f64> {
        match *self {
            Regularization::Fixed(mu) => Ok(mu),
            Regularization::Relative(factor) => Ok(factor * system.frobenius_sq()),
            Regularization::Discrepancy { noise, tau } => discrepancy_mu(system, tau * noise),
        }
    }
}

fn discrepancy_mu(system: &CalibrationSystem, target: f64) -> Result<f64> {
    let scale = system.frobenius_sq().max(f64::MIN_POSITIVE);
    let residual = |log_mu: f64| -> Result<f64> {
        let a = system.solve_regularized(log_mu.exp())?;
        Ok(system.residual_norm(&a))
    };
    let mut lo = (1e-16 * scale).ln();
    let mut hi = (1e4 * scale).ln();
    if residual(lo)? > target {
        return Ok(lo.exp());
    }
    if residual(hi)? <= target {
        return Ok(hi.exp());
    }
    // residual grows monotonically with μ
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if residual(mid)? <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo.exp())
}

pub fn calibrate_drift(
    curve: &[f64],
    grid: &TenorGrid,
    statics: &HullWhiteStatics,
    convention: YieldConvention,
    rule: Regularization,
) -> Result<DriftVector> {
    let system = assemble_calibration_system(curve, grid, statics, convention)?;
    let mu = rule.choose_mu(&system)?;
    let a = system.solve_regularized(mu)?;
    DriftVector::new(a.iter().copied().collect(), grid.clone())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationSettings {
    pub b: f64,
    pub sigma: f64,
    pub r0_source: R0Source,
    pub convention: YieldConvention,
    pub rule: Regularization,
}

/// Row failures as `(scenario index, error message)`.
pub type CalibrationFailure = (usize, String);

/// Calibrates every curve. Failed rows are zero-filled and listed; more than 1% failures abort.
pub fn calibrate_all(
    curves: &YieldCurveSet,
    settings: &CalibrationSettings,
) -> Result<(ParameterSpace, Vec<CalibrationFailure>)> {
    let s = curves.len();
    let m = curves.grid.len();
    HullWhiteStatics::new(settings.b, settings.sigma, 0.0)?;
    let rows: Vec<(f64, Result<DriftVector>)> = (0..s)
        .into_par_iter()
        .map(|i| {
            let curve = curves.curve(i);
            let r0 = settings.r0_source.resolve(&curve);
            let result = HullWhiteStatics::new(settings.b, settings.sigma, r0)
                .and_then(|st| calibrate_drift(&curve, &curves.grid, &st, settings.convention, settings.rule));
            (r0, result)
        })
        .collect();
    let mut drifts = DMatrix::zeros(s, m);
    let mut r0 = Vec::with_capacity(s);
    let mut failures = Vec::new();
    for (i, (rate, result)) in rows.into_iter().enumerate() {
        r0.push(rate);
        match result {
            Ok(d) => {
                for (j, v) in d.values.iter().enumerate() {
                    drifts[(i, j)] = *v;
                }
            }
            Err(e) => failures.push((i, e.to_string())),
        }
    }
    if failures.len() * 100 > s {
        return Err(Error::CalibrationFailures {
            failed: failures.len(),
            total: s,
            first: format!("scenario {}: {}", failures[0].0, failures[0].1),
        });
    }
    let mu = match settings.rule {
        Regularization::Fixed(mu) => Some(mu),
        _ => None,
    };
    let space = ParameterSpace::new(
        drifts,
        curves.grid.clone(),
        settings.b,
        settings.sigma,
        r0,
        mu,
        settings.convention,
    )?;
    Ok((space, failures))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Composite Simpson on `n` panels.
    fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        let h = (hi - lo) / n as f64;
        let mut acc = f(lo) + f(hi);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(lo + k as f64 * h);
        }
        acc * h / 3.0
    }

    /// `B(t,T)` by quadrature of the general integral form with `κ(t) = b t`.
    /// The drift integral is split at `breaks` so each piece has a smooth integrand.
    fn quadrature_bond(
        b: f64,
        sigma: f64,
        r: f64,
        a: impl Fn(f64) -> f64,
        breaks: &[f64],
        t: f64,
        maturity: f64,
    ) -> f64 {
        let kappa = |x: f64| b * x;
        let inner = |v: f64| simpson(|z| (-kappa(z)).exp(), v, maturity, 200);
        let gamma = (kappa(t)).exp() * inner(t);
        let mut edges: Vec<f64> = std::iter::once(t)
            .chain(breaks.iter().copied().filter(|&x| x > t && x < maturity))
            .chain(std::iter::once(maturity))
            .collect();
        edges.dedup();
        let mut lam = 0.0;
        for w in edges.windows(2) {
            let level = a(0.5 * (w[0] + w[1]));
            lam += simpson(
                |v| {
                    let g = inner(v);
                    kappa(v).exp() * level * g - 0.5 * (2.0 * kappa(v)).exp() * sigma * sigma * g * g
                },
                w[0],
                w[1],
                1000,
            );
        }
        (-r * gamma - lam).exp()
    }

    fn grid(labels: &[&str]) -> TenorGrid {
        TenorGrid::from_labels(labels).unwrap()
    }

    #[test]
    fn same_date_price_is_one() {
        let st = HullWhiteStatics::new(0.015, 0.006, 0.01).unwrap();
        let d = DriftVector::constant(0.002, grid(&["1Y", "5Y"]));
        assert_eq!(bond_price_closed_form(&st, &d, 3.0, 3.0).unwrap(), 1.0);
        assert!(bond_price_closed_form(&st, &d, 4.0, 3.0).is_err());
    }

    #[test]
    fn zero_drift_zero_vol_matches_gamma_closed_form() {
        let (b, r0, t) = (0.03, 0.02, 7.0);
        let st = HullWhiteStatics::new(b, 0.0, r0).unwrap();
        let d = DriftVector::constant(0.0, grid(&["1Y", "10Y"]));
        let expected = (-r0 * (1.0 - (-b * t).exp()) / b).exp();
        assert_relative_eq!(
            bond_price_closed_form(&st, &d, 0.0, t).unwrap(),
            expected,
            epsilon = 1e-15
        );
    }

    #[test]
    fn constant_drift_matches_quadrature() {
        let st = HullWhiteStatics::new(0.015, 0.006, 0.01).unwrap();
        let d = DriftVector::constant(0.002, grid(&["1Y", "2Y", "5Y"]));
        let exact = bond_price_closed_form(&st, &d, 0.0, 5.0).unwrap();
        let oracle = quadrature_bond(0.015, 0.006, 0.01, |_| 0.002, &[], 0.0, 5.0);
        assert!((exact - oracle).abs() < 1e-8, "{exact} vs {oracle}");
    }

    #[test]
    fn piecewise_drift_matches_quadrature_from_later_start() {
        let g = grid(&["6M", "2Y", "5Y", "10Y"]);
        let values = vec![0.004, -0.001, 0.0025, 0.001];
        let st = HullWhiteStatics::new(0.05, 0.01, 0.015).unwrap();
        let d = DriftVector::new(values.clone(), g.clone()).unwrap();
        let times = g.times().to_vec();
        let a = |v: f64| values[bucket_index(&times, v)];
        for (t, mat) in [(0.0, 10.0), (1.0, 4.0), (0.3, 12.0)] {
            let exact = bond_price_at_rate(&st, &d, 0.015, t, mat).unwrap();
            let oracle = quadrature_bond(0.05, 0.01, 0.015, a, &times, t, mat);
            assert!((exact - oracle).abs() < 1e-7, "t={t} T={mat}: {exact} vs {oracle}");
        }
    }

    #[test]
    fn series_branches_agree_with_closed_forms() {
        // just either side of the switch point
        let u = 1.0;
        let lo = HullWhiteStatics::new(0.999e-3, 0.0, 0.0).unwrap();
        let hi = HullWhiteStatics::new(1.001e-3, 0.0, 0.0).unwrap();
        assert_relative_eq!(lo.gamma_integral(u), hi.gamma_integral(u), max_relative = 1e-5);
        assert_relative_eq!(lo.gamma_sq_integral(u), hi.gamma_sq_integral(u), max_relative = 1e-5);
        let tiny = HullWhiteStatics::new(1e-9, 0.0, 0.0).unwrap();
        assert_relative_eq!(tiny.gamma_integral(2.0), 2.0, max_relative = 1e-8);
        assert_relative_eq!(tiny.gamma_sq_integral(3.0), 9.0, max_relative = 1e-8);
    }

    #[test]
    fn first_bucket_is_scalar_equation() {
        let st = HullWhiteStatics::new(0.015, 0.006, 0.01).unwrap();
        let g = grid(&["3Y", "5Y"]);
        let sys = assemble_calibration_system(&[0.02, 0.021], &g, &st, YieldConvention::Annualized).unwrap();
        let a = sys.forward_substitution().unwrap();
        assert_relative_eq!(a[0], sys.f[0] / sys.e[(0, 0)], epsilon = 1e-15);
    }

    #[test]
    fn system_is_lower_triangular() {
        let st = HullWhiteStatics::new(0.015, 0.006, 0.01).unwrap();
        let g = grid(&["1M", "6M", "1Y", "2Y", "5Y", "10Y"]);
        let curve = [0.01, 0.012, 0.013, 0.017, 0.02, 0.024];
        let sys = assemble_calibration_system(&curve, &g, &st, YieldConvention::Annualized).unwrap();
        for i in 0..6 {
            for j in i + 1..6 {
                assert_eq!(sys.e[(i, j)], 0.0);
            }
            assert!(sys.e[(i, i)] > 0.0);
        }
    }

    #[test]
    fn zero_first_tenor_is_singular() {
        let st = HullWhiteStatics::new(0.015, 0.006, 0.01).unwrap();
        let g = TenorGrid::new(vec!["0".into(), "1Y".into()], vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            assemble_calibration_system(&[0.01, 0.02], &g, &st, YieldConvention::Annualized),
            Err(Error::SingularDiagonal { index: 0, .. })
        ));
    }

    fn synthetic_curve(st: &HullWhiteStatics, d: &DriftVector) -> Vec<f64> {
        d.grid
            .times()
            .iter()
            .map(|&t| -bond_price_closed_form(st, d, 0.0, t).unwrap().ln() / t)
            .collect()
    }

    #[test]
    fn round_trip_recovers_drift() {
        let g = grid(&["1D", "1W", "1M", "3M", "6M", "1Y", "2Y", "3Y", "5Y", "7Y", "10Y"]);
        let values: Vec<f64> = (0..11).map(|i| 0.001 * ((i as f64) * 0.9).sin() + 0.0015).collect();
        let d = DriftVector::new(values.clone(), g.clone()).unwrap();
        let st = HullWhiteStatics::new(0.015, 0.006, 0.008).unwrap();
        let curve = synthetic_curve(&st, &d);
        let got = calibrate_drift(&curve, &g, &st, YieldConvention::Annualized, Regularization::Fixed(0.0)).unwrap();
        for (a, b) in got.values.iter().zip(&values) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn total_convention_round_trip() {
        let g = grid(&["1Y", "2Y", "4Y"]);
        let d = DriftVector::new(vec![0.003, 0.001, 0.002], g.clone()).unwrap();
        let st = HullWhiteStatics::new(0.1, 0.01, 0.02).unwrap();
        let total: Vec<f64> = g
            .times()
            .iter()
            .map(|&t| -bond_price_closed_form(&st, &d, 0.0, t).unwrap().ln())
            .collect();
        let got = calibrate_drift(&total, &g, &st, YieldConvention::Total, Regularization::Fixed(0.0)).unwrap();
        for (a, b) in got.values.iter().zip(&d.values) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn tiny_mu_matches_direct_solve() {
        let g = grid(&["1Y", "2Y", "3Y", "5Y"]);
        let st = HullWhiteStatics::new(0.015, 0.006, 0.01).unwrap();
        let sys =
            assemble_calibration_system(&[0.01, 0.012, 0.014, 0.017], &g, &st, YieldConvention::Annualized).unwrap();
        let direct = sys.forward_substitution().unwrap();
        let reg = sys.solve_regularized(1e-16).unwrap();
        assert_relative_eq!(direct, reg, epsilon = 1e-10);
    }

    #[test]
    fn norm_shrinks_with_mu() {
        let g = grid(&["1Y", "2Y", "3Y", "5Y"]);
        let st = HullWhiteStatics::new(0.015, 0.006, 0.01).unwrap();
        let sys =
            assemble_calibration_system(&[0.01, 0.012, 0.014, 0.017], &g, &st, YieldConvention::Annualized).unwrap();
        let scale = sys.frobenius_sq();
        let mut prev = f64::INFINITY;
        for k in -10..=6 {
            let n = sys.solve_regularized(scale * 10f64.powi(k)).unwrap().norm();
            assert!(n <= prev * (1.0 + 1e-12));
            prev = n;
        }
        assert!(prev < 1e-5);
    }

    #[test]
    fn discrepancy_principle_beats_unregularized_on_noisy_data() {
        let g = grid(&["1D", "1W", "1M", "3M", "6M", "1Y", "2Y", "3Y", "5Y", "7Y", "10Y"]);
        let truth: Vec<f64> = (0..11).map(|i| 0.002 + 0.0005 * (i as f64 * 0.7).cos()).collect();
        let d = DriftVector::new(truth.clone(), g.clone()).unwrap();
        let st = HullWhiteStatics::new(0.015, 0.006, 0.01).unwrap();
        let mut sys =
            assemble_calibration_system(&synthetic_curve(&st, &d), &g, &st, YieldConvention::Annualized).unwrap();
        // deterministic perturbation of size 1e-4 per entry
        let noise = DVector::from_fn(11, |i, _| if i % 2 == 0 { 1e-4 } else { -1e-4 });
        sys.f += &noise;
        let truth = DVector::from_vec(truth);
        let plain = (sys.forward_substitution().unwrap() - &truth).norm();
        let rule = Regularization::Discrepancy {
            noise: noise.norm(),
            tau: 1.0,
        };
        let mu = rule.choose_mu(&sys).unwrap();
        let reg = (sys.solve_regularized(mu).unwrap() - &truth).norm();
        assert!(reg < plain, "regularized {reg} vs plain {plain}");
    }

    #[test]
    fn calibrate_all_duplicates_give_identical_rows() {
        let g = grid(&["1M", "1Y", "5Y"]);
        let row = [0.011, 0.013, 0.018];
        let curves = YieldCurveSet {
            curves: DMatrix::from_fn(4, 3, |_, j| row[j]),
            grid: g.clone(),
            seed: 0,
            gamma: 0.0,
            p_sim: 1,
            energies: vec![],
        };
        let settings = CalibrationSettings {
            b: 0.015,
            sigma: 0.006,
            r0_source: R0Source::FirstTenor,
            convention: YieldConvention::Annualized,
            rule: Regularization::default(),
        };
        let (space, failures) = calibrate_all(&curves, &settings).unwrap();
        assert!(failures.is_empty());
        assert_eq!(space.len(), 4);
        for i in 1..4 {
            assert_eq!(space.drifts.row(i), space.drifts.row(0));
        }
        let st = HullWhiteStatics::new(0.015, 0.006, 0.011).unwrap();
        let single = calibrate_drift(&row, &g, &st, YieldConvention::Annualized, Regularization::default()).unwrap();
        assert_eq!(space.drifts.row(0).iter().copied().collect::<Vec<_>>(), single.values);
    }

    #[test]
    fn bucket_lookup_is_left_open() {
        let g = grid(&["1Y", "2Y"]);
        let d = DriftVector::new(vec![1.0, 2.0], g).unwrap();
        assert_eq!(d.at(0.0), 1.0);
        assert_eq!(d.at(1.0), 1.0);
        assert_eq!(d.at(1.0 + 1e-6), 2.0);
        assert_eq!(d.at(7.0), 2.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn bond_price_decreases_with_maturity(a in 0.0f64..0.01, r in 0.001f64..0.05, b in 0.005f64..0.2) {
            let st = HullWhiteStatics::new(b, 0.0, r).unwrap();
            let d = DriftVector::constant(a, grid(&["1Y", "5Y", "10Y"]));
            let mut prev = 1.0;
            for k in 1..=40 {
                let p = bond_price_closed_form(&st, &d, 0.0, k as f64 * 0.25).unwrap();
                prop_assert!(p < prev);
                prev = p;
            }
        }

        #[test]
        fn round_trip_random_drift(vals in proptest::collection::vec(-0.005f64..0.005, 6), r0 in -0.005f64..0.03) {
            let g = grid(&["1M", "3M", "1Y", "2Y", "5Y", "10Y"]);
            let d = DriftVector::new(vals.clone(), g.clone()).unwrap();
            let st = HullWhiteStatics::new(0.015, 0.006, r0).unwrap();
            let curve = synthetic_curve(&st, &d);
            let got = calibrate_drift(&curve, &g, &st, YieldConvention::Annualized, Regularization::Fixed(0.0)).unwrap();
            for (x, y) in got.values.iter().zip(&vals) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
