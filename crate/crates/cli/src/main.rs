//! `hwmor`: scenario simulation, calibration, reduced-basis training and pricing.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hwmor::config::PipelineConfig;
use hwmor::Error;

#[derive(Parser, Debug)]
#[command(
    name = "hwmor",
    version,
    about = "Hull-White scenario pricing with reduced-order models"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Overrides applied on top of the config file. Flags beat environment variables.
#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// JSON pipeline configuration.
    #[arg(long, global = true, env = "HWMOR_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "HWMOR_SEED")]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "HWMOR_THREADS")]
    pub threads: Option<usize>,
    /// POD energy level in percent.
    #[arg(long, global = true, env = "HWMOR_ENERGY_LEVEL")]
    pub energy_level: Option<f64>,
    /// Rate grid points.
    #[arg(long = "grid-points", short = 'M', global = true, env = "HWMOR_M")]
    pub grid_points: Option<usize>,
    #[arg(long, global = true, env = "HWMOR_DT_DAYS")]
    pub dt_days: Option<f64>,
    #[arg(long, global = true, env = "HWMOR_THETA")]
    pub theta: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the bundled synthetic rate history.
    SampleData {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 1306)]
        observations: usize,
    },
    /// Bootstrap yield curves from a rate history.
    Simulate {
        /// Rate history CSV; the bundled sample is used when omitted.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        /// Number of simulated curves.
        #[arg(long = "count", short = 's', visible_alias = "s", env = "HWMOR_BOOTSTRAP_COUNT")]
        count: Option<usize>,
        /// Holding period in observation days.
        #[arg(long = "horizon-days", visible_alias = "h", env = "HWMOR_HOLDING_PERIOD_DAYS")]
        horizon_days: Option<usize>,
        #[arg(long)]
        components: Option<usize>,
    },
    /// Calibrate one drift vector per curve.
    Calibrate {
        #[arg(long)]
        curves: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Drop tenors beyond this many years before calibrating.
        #[arg(long)]
        max_tenor: Option<f64>,
        #[arg(long, env = "HWMOR_B")]
        b: Option<f64>,
        #[arg(long, env = "HWMOR_SIGMA")]
        sigma: Option<f64>,
        /// Fixed Tikhonov weight (default: relative rule).
        #[arg(long, env = "HWMOR_MU")]
        mu: Option<f64>,
    },
    /// Build a reduced basis by greedy snapshot selection.
    Train {
        #[arg(long)]
        params: PathBuf,
        /// Instrument JSON; the reference floater is used when omitted.
        #[arg(long)]
        instrument: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_enum, default_value_t = StrategyArg::Adaptive)]
        strategy: StrategyArg,
        #[arg(long = "Imax")]
        i_max: Option<usize>,
        #[arg(long = "C")]
        c: Option<usize>,
        #[arg(long = "C0")]
        c_0: Option<usize>,
        #[arg(long = "Ck")]
        c_k: Option<usize>,
        /// Directory for residual and error-model CSVs.
        #[arg(long)]
        plot_data: Option<PathBuf>,
    },
    /// Value every scenario and write the percentile report.
    Price {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        instrument: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = EngineArg::Rom)]
        engine: EngineArg,
        #[arg(long)]
        basis: Option<PathBuf>,
        #[arg(long)]
        values: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Reporting horizons in years; the last must be the maturity.
        #[arg(long, value_delimiter = ',', default_values_t = [5.0, 10.0])]
        horizons: Vec<f64>,
        #[arg(long, value_enum, default_value_t = HorizonArg::Checkpoint)]
        horizon_mode: HorizonArg,
    },
    /// Time basis construction and both engines.
    Bench {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        instrument: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        /// Scenario count the totals are reported for.
        #[arg(long)]
        scenarios: Option<usize>,
        /// HDM solves actually timed.
        #[arg(long, default_value_t = 20)]
        hdm_sample: usize,
    },
    /// Re-hash the inputs and artifacts listed in a manifest.
    Verify { manifest: PathBuf },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum StrategyArg {
    Classical,
    Adaptive,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineArg {
    Hdm,
    Rom,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum HorizonArg {
    Checkpoint,
    SeparateRun,
}

impl GlobalArgs {
    /// File (or default) configuration with the global overrides applied.
    pub fn resolve(&self) -> hwmor::Result<(PipelineConfig, String)> {
        let mut config = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.energy_level {
            config.energy_level = v;
        }
        if let Some(v) = self.grid_points {
            config.fdm.m = v;
        }
        if let Some(v) = self.dt_days {
            config.fdm.dt_days = v;
        }
        if let Some(v) = self.theta {
            config.fdm.theta = v;
        }
        config.validate()?;
        let json = config.to_json();
        Ok((config, json))
    }
}

fn exit_code(err: &Error) -> u8 {
    if err.is_numerical() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
