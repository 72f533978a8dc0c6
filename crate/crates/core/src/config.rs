//! Pipeline configuration, loaded from JSON with per-field defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{R0Source, YieldConvention};
use crate::curve_sim::ReturnFormula;
use crate::error::{Error, Result};
use crate::fdm::MarchDirection;
use crate::rom::{ResidualAggregation, ResidualMode, SnapshotMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub shift_epsilon: f64,
    /// Percent of POD energy retained, in (0, 100].
    pub energy_level: f64,
    pub seed: u64,
    pub bootstrap_count: usize,
    pub holding_period_days: usize,
    /// Retained return components; `None` picks the smallest count reaching 99% energy.
    pub pca_components: Option<usize>,
    pub return_formula: ReturnFormula,
    pub forward_adjustment: bool,
    pub greedy: GreedyConfig,
    pub fdm: FdmConfig,
    /// Tikhonov weight; `None` uses `1e-8 * ||E||_F^2` per curve.
    pub tikhonov_mu: Option<f64>,
    pub yield_convention: YieldConvention,
    pub r0_source: R0Source,
    pub statics: StaticsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            shift_epsilon: 1e-4,
            energy_level: 99.99,
            seed: 42,
            bootstrap_count: 10_000,
            holding_period_days: 2600,
            pca_components: None,
            return_formula: ReturnFormula::LogDifference,
            forward_adjustment: true,
            greedy: GreedyConfig::default(),
            fdm: FdmConfig::default(),
            tikhonov_mu: None,
            yield_convention: YieldConvention::Annualized,
            r0_source: R0Source::FirstTenor,
            statics: StaticsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GreedyConfig {
    #[serde(rename = "I_max")]
    pub i_max: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "C_0")]
    pub c_0: usize,
    #[serde(rename = "C_k")]
    pub c_k: usize,
    pub eps_tol: f64,
    pub e_max_tol: f64,
    pub pcr_components: usize,
    pub residual_aggregation: ResidualAggregation,
    pub residual_mode: ResidualMode,
    pub snapshots: SnapshotMode,
}

impl Default for GreedyConfig {
    fn default() -> Self {
        Self {
            i_max: 10,
            c: 40,
            c_0: 20,
            c_k: 10,
            eps_tol: 1e-4,
            e_max_tol: 1e-3,
            pcr_components: 4,
            residual_aggregation: ResidualAggregation::Max,
            residual_mode: ResidualMode::Compressed,
            snapshots: SnapshotMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdmConfig {
    #[serde(rename = "M")]
    pub m: usize,
    pub theta: f64,
    pub dt_days: f64,
    /// Fixed `[lower, upper]` rate window; `None` uses the ±7σ√T rule around the spot rate.
    pub window: Option<[f64; 2]>,
    pub march: MarchDirection,
}

impl Default for FdmConfig {
    fn default() -> Self {
        Self {
            m: 600,
            theta: 0.5,
            dt_days: 1.0,
            window: Some([-0.1, 0.1]),
            march: MarchDirection::Forward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StaticsConfig {
    pub b: f64,
    pub sigma: f64,
}

impl Default for StaticsConfig {
    fn default() -> Self {
        Self { b: 0.015, sigma: 0.006 }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.bootstrap_count < 1 {
            return bad("bootstrap_count must be at least 1".into());
        }
        if self.holding_period_days < 1 {
            return bad("holding_period_days must be at least 1".into());
        }
        if self.fdm.m < 3 {
            return bad(format!("M must be at least 3, got {}", self.fdm.m));
        }
        if !(0.0..=1.0).contains(&self.fdm.theta) {
            return bad(format!("theta must lie in [0, 1], got {}", self.fdm.theta));
        }
        if !(self.fdm.dt_days > 0.0) {
            return bad("dt_days must be positive".into());
        }
        if let Some([lo, hi]) = self.fdm.window {
            if !(hi > lo) {
                return bad(format!("rate window [{lo}, {hi}] is empty"));
            }
        }
        if !(self.energy_level > 0.0 && self.energy_level <= 100.0) {
            return bad(format!("energy_level must lie in (0, 100], got {}", self.energy_level));
        }
        if !(self.shift_epsilon > 0.0) {
            return bad("shift_epsilon must be positive".into());
        }
        let g = &self.greedy;
        if g.i_max < 1 {
            return bad("I_max must be at least 1".into());
        }
        if g.c_k < 1 {
            return bad("C_k must be at least 1".into());
        }
        if g.c <= g.c_0 {
            return bad(format!("C ({}) must exceed C_0 ({})", g.c, g.c_0));
        }
        if g.c_0 < 2 {
            return bad("C_0 must be at least 2 to fit a surrogate".into());
        }
        if g.pcr_components < 1 {
            return bad("pcr_components must be at least 1".into());
        }
        if let Some(p) = self.pca_components {
            if p < 1 {
                return bad("pca_components must be at least 1".into());
            }
        }
        if let Some(mu) = self.tikhonov_mu {
            if !(mu >= 0.0) {
                return bad("tikhonov_mu must be non-negative".into());
            }
        }
        if !(self.statics.b > 0.0) || !(self.statics.sigma >= 0.0) {
            return bad("statics need b > 0 and sigma >= 0".into());
        }
        Ok(())
    }
}
