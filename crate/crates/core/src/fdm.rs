//! Finite-difference pricer for the Hull-White PDE on an equidistant short-rate grid.
//!
//! Spatial operator per interior node:
//! `L V_i = σ²/2 (V_{i+1} - 2V_i + V_{i-1})/dx² + c_i D_i V - r_i V_i`, `c_i = a - b r_i`,
//! where `D_i` is the backward difference when `c_i > 0` and the forward difference otherwise.
//! Time stepping uses the θ-scheme `(I - θ dt L(t+dt)) V^{n+1} = (I + (1-θ) dt L(t)) V^n`.

use serde::{Deserialize, Serialize};

use crate::calibration::{bucket_index, HullWhiteStatics};
use crate::config::FdmConfig;
use crate::error::{Error, Result};
use crate::linalg::{Tridiagonal, TridiagonalLu};
use crate::market_data::DAYS_PER_YEAR;
use crate::params::ParameterGroup;

#[derive(Debug, Clone, PartialEq)]
pub struct RateGrid {
    pub points: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
    pub dx: f64,
}

impl RateGrid {
    pub fn uniform(lower: f64, upper: f64, m: usize) -> Result<Self> {
        if m < 3 {
            return Err(Error::InvalidInput(format!(
                "rate grid needs at least 3 points, got {m}"
            )));
        }
        if !(upper > lower) {
            return Err(Error::DegenerateDomain {
                center: 0.5 * (lower + upper),
            });
        }
        let dx = (upper - lower) / (m - 1) as f64;
        let mut points: Vec<f64> = (0..m).map(|i| lower + i as f64 * dx).collect();
        points[m - 1] = upper;
        Ok(Self {
            points,
            lower,
            upper,
            dx,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Linear interpolation of nodal `values` at `rate`.
    pub fn interpolate(&self, values: &[f64], rate: f64) -> Result<f64> {
        let tol = 1e-12 * self.dx;
        if !(rate >= self.lower - tol && rate <= self.upper + tol) {
            return Err(Error::OutOfDomain {
                rate,
                lower: self.lower,
                upper: self.upper,
            });
        }
        let m = self.len();
        let pos = ((rate - self.lower) / self.dx).clamp(0.0, (m - 1) as f64);
        let i = (pos.floor() as usize).min(m - 2);
        let w = pos - i as f64;
        if w == 0.0 {
            return Ok(values[i]);
        }
        Ok(values[i] * (1.0 - w) + values[i + 1] * w)
    }

    /// Interpolation when only the bracketing values `pair = [V_i, V_{i+1}]` are known.
    pub fn interpolate_pair(&self, i: usize, pair: [f64; 2], rate: f64) -> Result<f64> {
        let m = self.len();
        let tol = 1e-12 * self.dx;
        if !(rate >= self.lower - tol && rate <= self.upper + tol) {
            return Err(Error::OutOfDomain {
                rate,
                lower: self.lower,
                upper: self.upper,
            });
        }
        let pos = ((rate - self.lower) / self.dx).clamp(0.0, (m - 1) as f64);
        let w = pos - i as f64;
        if w == 0.0 {
            return Ok(pair[0]);
        }
        Ok(pair[0] * (1.0 - w) + pair[1] * w)
    }
}

/// Grid spanning `spot ± 7σ√T`, or the fixed `window` when given.
pub fn build_rate_grid(
    statics: &HullWhiteStatics,
    spot: f64,
    maturity: f64,
    m: usize,
    window: Option<[f64; 2]>,
) -> Result<RateGrid> {
    match window {
        Some([lo, hi]) => RateGrid::uniform(lo.min(hi), lo.max(hi), m),
        None => {
            let half = 7.0 * statics.sigma * maturity.max(0.0).sqrt();
            if !(half > 0.0) {
                return Err(Error::DegenerateDomain { center: spot });
            }
            RateGrid::uniform(spot - half, spot + half, m)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrumentKind {
    ZeroCouponBond,
    CappedFlooredFloater,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstrumentSpec {
    pub kind: InstrumentKind,
    pub nominal: f64,
    /// Years.
    pub maturity: f64,
    /// Coupons per year.
    #[serde(default = "default_frequency")]
    pub coupon_frequency: u32,
    #[serde(default)]
    pub cap_rate: f64,
    #[serde(default)]
    pub floor_rate: f64,
    #[serde(default = "default_reference")]
    pub reference_tenor: String,
}

fn default_frequency() -> u32 {
    4
}

fn default_reference() -> String {
    "3M".into()
}

impl InstrumentSpec {
    /// Ten-year quarterly floater, cap 2.25%, floor 0.5%, nominal 1.
    pub fn reference_floater() -> Self {
        Self {
            kind: InstrumentKind::CappedFlooredFloater,
            nominal: 1.0,
            maturity: 10.0,
            coupon_frequency: 4,
            cap_rate: 0.0225,
            floor_rate: 0.005,
            reference_tenor: "3M".into(),
        }
    }

    pub fn zero_coupon_bond(maturity: f64) -> Self {
        Self {
            kind: InstrumentKind::ZeroCouponBond,
            nominal: 1.0,
            maturity,
            coupon_frequency: default_frequency(),
            cap_rate: 0.0,
            floor_rate: 0.0,
            reference_tenor: default_reference(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nominal > 0.0) || !(self.maturity > 0.0) {
            return Err(Error::InvalidInput(
                "instrument needs positive nominal and maturity".into(),
            ));
        }
        if self.kind == InstrumentKind::CappedFlooredFloater {
            if self.coupon_frequency == 0 {
                return Err(Error::InvalidInput("coupon frequency must be positive".into()));
            }
            if !(self.floor_rate <= self.cap_rate) {
                return Err(Error::InvalidInput(format!(
                    "floor {} exceeds cap {}",
                    self.floor_rate, self.cap_rate
                )));
            }
        }
        Ok(())
    }

    /// Coupon paid at a grid node whose short rate is `rate`.
    pub fn coupon(&self, rate: f64) -> f64 {
        match self.kind {
            InstrumentKind::ZeroCouponBond => 0.0,
            InstrumentKind::CappedFlooredFloater => {
                self.nominal * rate.max(self.floor_rate).min(self.cap_rate) / self.coupon_frequency as f64
            }
        }
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Direction of the time march.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarchDirection {
    /// From `V(0) = nominal`, drift read at the march time, coupons added after each coupon-date solve.
    #[default]
    Forward,
    /// Time-to-maturity march from the redemption payoff, drift read at `T - τ`.
    Backward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    /// Years per step.
    pub dt: f64,
    pub steps: usize,
    /// Steps between coupon dates; `None` for instruments without coupons.
    pub coupon_interval: Option<usize>,
}

fn integral_ratio(x: f64, what: &str) -> Result<usize> {
    let n = x.round();
    if n < 1.0 || (x - n).abs() > 1e-9 * x.max(1.0) {
        return Err(Error::ScheduleMismatch(format!(
            "{what} is {x}, not a positive whole number of steps"
        )));
    }
    Ok(n as usize)
}

impl Schedule {
    pub fn new(spec: &InstrumentSpec, dt_days: f64) -> Result<Self> {
        if !(dt_days > 0.0) {
            return Err(Error::ScheduleMismatch(format!("step of {dt_days} days")));
        }
        let steps = integral_ratio(spec.maturity * DAYS_PER_YEAR / dt_days, "maturity")?;
        let coupon_interval = match spec.kind {
            InstrumentKind::ZeroCouponBond => None,
            InstrumentKind::CappedFlooredFloater => {
                let every = integral_ratio(
                    DAYS_PER_YEAR / (spec.coupon_frequency as f64 * dt_days),
                    "coupon period",
                )?;
                if steps % every != 0 {
                    return Err(Error::ScheduleMismatch(format!(
                        "{steps} steps are not a multiple of the {every}-step coupon period"
                    )));
                }
                Some(every)
            }
        };
        Ok(Self {
            dt: dt_days / DAYS_PER_YEAR,
            steps,
            coupon_interval,
        })
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    /// Step index of a horizon in years, if it falls on the schedule.
    pub fn step_at(&self, years: f64) -> Result<usize> {
        if years == 0.0 {
            return Ok(0);
        }
        let n = integral_ratio(years / self.dt, "horizon")?;
        if n > self.steps {
            return Err(Error::ScheduleMismatch(format!("horizon {years}y is past maturity")));
        }
        Ok(n)
    }

    /// Steps `0, stride, 2·stride, ...` plus the final step.
    pub fn checkpoints(&self, stride: usize) -> Vec<usize> {
        let stride = stride.max(1);
        let mut out: Vec<usize> = (0..=self.steps).step_by(stride).collect();
        if *out.last().unwrap() != self.steps {
            out.push(self.steps);
        }
        out
    }
}

pub fn apply_boundary_conditions(a: &mut Tridiagonal, rhs: Option<&mut [f64]>) {
    let m = a.dim();
    a.diag[0] = -1.0;
    a.upper[0] = 1.0;
    a.lower[m - 1] = 1.0;
    a.diag[m - 1] = -1.0;
    if let Some(rhs) = rhs {
        rhs[0] = 0.0;
        rhs[m - 1] = 0.0;
    }
}

/// Spatial operator `L` for drift value `a`.
pub fn spatial_operator(grid: &RateGrid, b: f64, sigma: f64, a: f64) -> Tridiagonal {
    let m = grid.len();
    let dx = grid.dx;
    let diff = 0.5 * sigma * sigma / (dx * dx);
    let mut l = Tridiagonal::zeros(m);
    for (i, &r) in grid.points.iter().enumerate() {
        let c = a - b * r;
        let (mut lo, mut di, mut up) = (diff, -2.0 * diff - r, diff);
        // Upwind for the time-to-maturity march: information travels against `c`.
        if c > 0.0 {
            di -= c / dx;
            up += c / dx;
        } else {
            lo -= c / dx;
            di += c / dx;
        }
        if i > 0 {
            l.lower[i] = lo;
        }
        l.diag[i] = di;
        if i + 1 < m {
            l.upper[i] = up;
        }
    }
    l
}

/// `A = I - θ dt L(a_next)` and `B = I + (1-θ) dt L(a_now)` with Neumann rows:
/// the boundary rows of `A` are difference stencils and those of `B` are zero.
pub fn assemble_operators(
    grid: &RateGrid,
    b: f64,
    sigma: f64,
    a_now: f64,
    a_next: f64,
    dt: f64,
    theta: f64,
) -> (Tridiagonal, Tridiagonal) {
    let m = grid.len();
    let eye = Tridiagonal::identity(m);
    let mut a = eye.add_scaled(-theta * dt, &spatial_operator(grid, b, sigma, a_next));
    let mut bm = eye.add_scaled((1.0 - theta) * dt, &spatial_operator(grid, b, sigma, a_now));
    apply_boundary_conditions(&mut a, None);
    for i in [0, m - 1] {
        bm.lower[i] = 0.0;
        bm.diag[i] = 0.0;
        bm.upper[i] = 0.0;
    }
    (a, bm)
}

/// One step: `V ← A⁻¹ (B V) + coupon`.
pub fn step(a: &Tridiagonal, b: &Tridiagonal, v: &[f64], coupon: Option<&[f64]>) -> Result<Vec<f64>> {
    let lu = a.factor()?;
    let mut out = vec![0.0; v.len()];
    b.mul_slice(v, &mut out);
    let m = out.len();
    out[0] = 0.0;
    out[m - 1] = 0.0;
    lu.solve_in_place(&mut out);
    if let Some(c) = coupon {
        out.iter_mut().zip(c).for_each(|(x, y)| *x += y);
    }
    Ok(out)
}

/// Fixed pricing setup shared by every parameter group.
#[derive(Debug, Clone)]
pub struct FdmProblem {
    pub grid: RateGrid,
    pub spec: InstrumentSpec,
    pub schedule: Schedule,
    pub theta: f64,
    pub march: MarchDirection,
}

#[derive(Debug, Clone)]
pub struct HdmSolution {
    /// Step indices of the stored states.
    pub steps: Vec<usize>,
    /// Years, one per stored state.
    pub time_axis: Vec<f64>,
    /// `M × checkpoints`, column-major.
    pub values: nalgebra::DMatrix<f64>,
    pub parameter: usize,
}

impl HdmSolution {
    pub fn final_values(&self) -> Vec<f64> {
        self.values.column(self.values.ncols() - 1).iter().copied().collect()
    }

    pub fn at_step(&self, step: usize) -> Option<Vec<f64>> {
        let k = self.steps.iter().position(|&s| s == step)?;
        Some(self.values.column(k).iter().copied().collect())
    }
}

/// What happens at one march step: which drift values define `A` and `B`, and whether a coupon follows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPlan {
    pub a_now: f64,
    pub a_next: f64,
    pub coupon: bool,
}

impl FdmProblem {
    pub fn new(spec: InstrumentSpec, grid: RateGrid, config: &FdmConfig) -> Result<Self> {
        spec.validate()?;
        if !(0.0..=1.0).contains(&config.theta) {
            return Err(Error::InvalidInput(format!(
                "theta must lie in [0, 1], got {}",
                config.theta
            )));
        }
        let schedule = Schedule::new(&spec, config.dt_days)?;
        Ok(Self {
            grid,
            spec,
            schedule,
            theta: config.theta,
            march: config.march,
        })
    }

    /// Problem on the configured fixed window (or the ±7σ√T rule around `spot`).
    pub fn from_config(
        spec: InstrumentSpec,
        statics: &HullWhiteStatics,
        spot: f64,
        config: &FdmConfig,
    ) -> Result<Self> {
        let grid = build_rate_grid(statics, spot, spec.maturity, config.m, config.window)?;
        Self::new(spec, grid, config)
    }

    pub fn size(&self) -> usize {
        self.grid.len()
    }

    pub fn initial_condition(&self) -> Vec<f64> {
        let mut v = vec![self.spec.nominal; self.size()];
        if self.march == MarchDirection::Backward && self.schedule.coupon_interval.is_some() {
            v.iter_mut().zip(self.coupon_vector()).for_each(|(x, c)| *x += c);
        }
        v
    }

    pub fn coupon_vector(&self) -> Vec<f64> {
        self.grid.points.iter().map(|&r| self.spec.coupon(r)).collect()
    }

    fn calendar_time(&self, step: usize) -> f64 {
        let t = self.schedule.time(step);
        match self.march {
            MarchDirection::Forward => t,
            MarchDirection::Backward => self.spec.maturity - t,
        }
    }

    /// Plan for the step from `n` to `n + 1`.
    pub fn step_plan(&self, drift: &[f64], tenor_times: &[f64], n: usize) -> StepPlan {
        let lookup = |t: f64| drift[bucket_index(tenor_times, t)];
        let next = n + 1;
        let coupon = match self.schedule.coupon_interval {
            None => false,
            Some(every) => {
                next.is_multiple_of(every) && (self.march == MarchDirection::Forward || next < self.schedule.steps)
            }
        };
        StepPlan {
            a_now: lookup(self.calendar_time(n)),
            a_next: lookup(self.calendar_time(next)),
            coupon,
        }
    }

    pub fn operators(&self, b: f64, sigma: f64, plan: &StepPlan) -> (Tridiagonal, Tridiagonal) {
        assemble_operators(
            &self.grid,
            b,
            sigma,
            plan.a_now,
            plan.a_next,
            self.schedule.dt,
            self.theta,
        )
    }

    /// Full march storing the states at `capture` steps (sorted ascending).
    pub fn solve(&self, rho: &ParameterGroup, capture: &[usize]) -> Result<HdmSolution> {
        let m = self.size();
        let times = rho.drift.grid.times();
        let coupon = self.coupon_vector();
        let mut v = self.initial_condition();
        let mut rhs = vec![0.0; m];
        let mut values = nalgebra::DMatrix::zeros(m, capture.len());
        let mut next_capture = 0;
        let store = |step: usize, v: &[f64], values: &mut nalgebra::DMatrix<f64>, k: &mut usize| {
            while *k < capture.len() && capture[*k] == step {
                values.column_mut(*k).copy_from_slice(v);
                *k += 1;
            }
        };
        store(0, &v, &mut values, &mut next_capture);
        let mut cached: Option<(f64, f64, Tridiagonal, TridiagonalLu)> = None;
        for n in 0..self.schedule.steps {
            let plan = self.step_plan(&rho.drift.values, times, n);
            let fresh = match &cached {
                Some((x, y, _, _)) => *x != plan.a_now || *y != plan.a_next,
                None => true,
            };
            if fresh {
                let (a, b) = self.operators(rho.b, rho.sigma, &plan);
                let lu = a.factor()?;
                cached = Some((plan.a_now, plan.a_next, b, lu));
            }
            let (_, _, b, lu) = cached.as_ref().unwrap();
            b.mul_slice(&v, &mut rhs);
            rhs[0] = 0.0;
            rhs[m - 1] = 0.0;
            lu.solve_in_place(&mut rhs);
            std::mem::swap(&mut v, &mut rhs);
            if plan.coupon {
                v.iter_mut().zip(&coupon).for_each(|(x, c)| *x += c);
            }
            store(n + 1, &v, &mut values, &mut next_capture);
        }
        if next_capture != capture.len() {
            return Err(Error::ScheduleMismatch(format!(
                "checkpoint {} lies past the last step {}",
                capture[next_capture], self.schedule.steps
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("finite-difference solution is not finite".into()));
        }
        Ok(HdmSolution {
            steps: capture.to_vec(),
            time_axis: capture.iter().map(|&s| self.schedule.time(s)).collect(),
            values,
            parameter: rho.index,
        })
    }
}
