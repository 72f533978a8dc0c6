use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hwmor::config::PipelineConfig;
use hwmor::curve_sim::{load_curves, save_curves};
use hwmor::fdm::InstrumentSpec;
use hwmor::greedy::{GreedyOutcome, GreedyTrace, Strategy};
use hwmor::market_data::{load_rate_history, save_rate_history};
use hwmor::params::{load_parameters, save_parameters, ParameterSpace};
use hwmor::pipeline::{self, HorizonMode, PricedScenarios};
use hwmor::report::{median_of_three, BasisTiming, Benchmark, EngineTiming, ScenarioReport};
use hwmor::rom::{load_basis, save_basis, RomSolver};
use hwmor::{Error, Result};

use crate::manifest::{sha256_file, RunManifest};
use crate::{Cli, Command, EngineArg, HorizonArg, StrategyArg};

const SAMPLE_SEED: u64 = 11;
const PARAMS_KEY: &str = "params_sha256";
const INSTRUMENT_KEY: &str = "instrument_sha256";

pub fn run(cli: &Cli) -> Result<()> {
    let (mut config, _) = cli.global.resolve()?;
    match &cli.command {
        Command::SampleData { out, observations } => {
            let history = pipeline::synthetic_history(*observations, SAMPLE_SEED)?;
            save_rate_history(&history, out)?;
            println!(
                "wrote {} observations x {} tenors to {}",
                history.observations(),
                history.tenors(),
                out.display()
            );
            Ok(())
        }
        Command::Simulate {
            history,
            out,
            count,
            horizon_days,
            components,
        } => {
            if let Some(v) = count {
                config.bootstrap_count = *v;
            }
            if let Some(v) = horizon_days {
                config.holding_period_days = *v;
            }
            if components.is_some() {
                config.pca_components = *components;
            }
            config.validate()?;
            simulate(&config, history.as_deref(), out)
        }
        Command::Calibrate {
            curves,
            out,
            max_tenor,
            b,
            sigma,
            mu,
        } => {
            if let Some(v) = b {
                config.statics.b = *v;
            }
            if let Some(v) = sigma {
                config.statics.sigma = *v;
            }
            if mu.is_some() {
                config.tikhonov_mu = *mu;
            }
            config.validate()?;
            calibrate(&config, curves, out, *max_tenor)
        }
        Command::Train {
            params,
            instrument,
            out,
            trace,
            strategy,
            i_max,
            c,
            c_0,
            c_k,
            plot_data,
        } => {
            let g = &mut config.greedy;
            for (slot, value) in [
                (&mut g.i_max, i_max),
                (&mut g.c, c),
                (&mut g.c_0, c_0),
                (&mut g.c_k, c_k),
            ] {
                if let Some(v) = value {
                    *slot = *v;
                }
            }
            config.validate()?;
            let strategy = match strategy {
                StrategyArg::Classical => Strategy::Classical,
                StrategyArg::Adaptive => Strategy::Adaptive,
            };
            train(
                &config,
                params,
                instrument.as_deref(),
                out,
                trace,
                strategy,
                plot_data.as_deref(),
            )
        }
        Command::Price {
            params,
            instrument,
            engine,
            basis,
            values,
            report,
            horizons,
            horizon_mode,
        } => {
            let mode = match horizon_mode {
                HorizonArg::Checkpoint => HorizonMode::Checkpoint,
                HorizonArg::SeparateRun => HorizonMode::SeparateRun,
            };
            let basis = match (engine, basis) {
                (EngineArg::Rom, None) => return Err(Error::InvalidInput("--engine rom needs --basis".into())),
                (EngineArg::Rom, Some(b)) => Some(b.as_path()),
                (EngineArg::Hdm, _) => None,
            };
            price(
                &config,
                params,
                instrument.as_deref(),
                basis,
                values,
                report,
                horizons,
                mode,
            )
        }
        Command::Bench {
            params,
            instrument,
            out,
            scenarios,
            hdm_sample,
        } => bench(&config, params, instrument.as_deref(), out, *scenarios, *hdm_sample),
        Command::Verify { manifest } => {
            let m = RunManifest::load(manifest)?;
            let changed = m.verify()?;
            if changed.is_empty() {
                println!(
                    "{}: {} files verified",
                    manifest.display(),
                    m.inputs.len() + m.artifacts.len()
                );
                Ok(())
            } else {
                Err(Error::Provenance(format!(
                    "changed since the run: {}",
                    changed.join(", ")
                )))
            }
        }
    }
}

fn load_instrument(path: Option<&Path>) -> Result<InstrumentSpec> {
    match path {
        Some(p) => InstrumentSpec::load(p),
        None => Ok(InstrumentSpec::reference_floater()),
    }
}

fn simulate(config: &PipelineConfig, history_path: Option<&Path>, out: &Path) -> Result<()> {
    let mut manifest = RunManifest::new("simulate", &config.to_json(), config.seed);
    let t = Instant::now();
    let history = match history_path {
        Some(p) => {
            manifest.input(p)?;
            load_rate_history(p)?
        }
        None => pipeline::synthetic_history(1306, SAMPLE_SEED)?,
    };
    manifest.stage("load", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let curves = pipeline::simulate(&history, config)?;
    manifest.stage("simulate", t.elapsed().as_secs_f64());
    save_curves(&curves, out)?;
    manifest.artifact(out)?;
    manifest.artifact(&hwmor::curve_sim::sidecar_path(out))?;
    manifest.save(out)?;
    println!(
        "wrote {} curves x {} tenors to {} (shift {:.2e}, {} components)",
        curves.len(),
        curves.grid.len(),
        out.display(),
        curves.gamma,
        curves.p_sim
    );
    Ok(())
}

fn calibrate(config: &PipelineConfig, curves_path: &Path, out: &Path, max_tenor: Option<f64>) -> Result<()> {
    let mut manifest = RunManifest::new("calibrate", &config.to_json(), config.seed);
    manifest.input(curves_path)?;
    let curves = load_curves(curves_path)?;
    let t = Instant::now();
    let (space, failures) = pipeline::calibrate(&curves, config, max_tenor)?;
    manifest.stage("calibrate", t.elapsed().as_secs_f64());
    for (i, msg) in &failures {
        eprintln!("warning: scenario {i} failed to calibrate and was zero-filled: {msg}");
    }
    save_parameters(&space, out)?;
    manifest.artifact(out)?;
    manifest.artifact(&hwmor::params::sidecar_path(out))?;
    manifest.save(out)?;
    println!(
        "wrote {} parameter groups x {} buckets to {}",
        space.len(),
        space.grid.len(),
        out.display()
    );
    Ok(())
}

fn setup(
    config: &PipelineConfig,
    params: &Path,
    instrument: Option<&Path>,
) -> Result<(ParameterSpace, InstrumentSpec, hwmor::fdm::FdmProblem)> {
    let space = load_parameters(params)?;
    let spec = load_instrument(instrument)?;
    let problem = pipeline::pricing_problem(&spec, &space, config)?;
    Ok((space, spec, problem))
}

fn instrument_hash(instrument: Option<&Path>) -> Result<String> {
    match instrument {
        Some(p) => sha256_file(p),
        None => Ok("reference_floater".into()),
    }
}

fn train(
    config: &PipelineConfig,
    params: &Path,
    instrument: Option<&Path>,
    out: &Path,
    trace_path: &Path,
    strategy: Strategy,
    plot_data: Option<&Path>,
) -> Result<()> {
    let mut manifest = RunManifest::new("train", &config.to_json(), config.seed);
    let params_hash = manifest.input(params)?;
    if let Some(p) = instrument {
        manifest.input(p)?;
    }
    let (space, _, problem) = setup(config, params, instrument)?;
    let t = Instant::now();
    let mut outcome = pipeline::train(&space, &problem, config, strategy)?;
    manifest.stage("reduction", t.elapsed().as_secs_f64());
    outcome.basis.provenance.insert(PARAMS_KEY.into(), params_hash);
    outcome
        .basis
        .provenance
        .insert(INSTRUMENT_KEY.into(), instrument_hash(instrument)?);
    outcome
        .basis
        .provenance
        .insert("strategy".into(), format!("{strategy:?}").to_lowercase());
    save_basis(&outcome.basis, out)?;
    write_json(trace_path, &outcome.trace)?;
    manifest.artifact(out)?;
    manifest.artifact(trace_path)?;
    if let Some(dir) = plot_data {
        for path in write_plot_data(dir, &outcome)? {
            manifest.artifact(&path)?;
        }
    }
    manifest.save(out)?;
    println!(
        "basis d = {} from {} snapshots after {} iterations ({:?}); wrote {} and {}",
        outcome.basis.dim(),
        outcome.trace.sources.len(),
        outcome.trace.records.len(),
        outcome.trace.terminated,
        out.display(),
        trace_path.display()
    );
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn flush(mut w: csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Tidy CSVs: per-candidate residuals and the error-model scatter.
fn write_plot_data(dir: &Path, outcome: &GreedyOutcome) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let trace: &GreedyTrace = &outcome.trace;
    let residuals = dir.join("residuals.csv");
    let mut w = csv_writer(&residuals)?;
    w.write_record(["iteration", "candidate", "residual", "chosen", "dim"])?;
    for r in &trace.records {
        for (c, e) in r.candidates.iter().zip(&r.residuals) {
            w.write_record([
                r.iteration.to_string(),
                c.to_string(),
                e.to_string(),
                (*c == r.chosen).to_string(),
                r.dim.to_string(),
            ])?;
        }
    }
    flush(w, &residuals)?;
    let scatter = dir.join("error_model.csv");
    let mut w = csv_writer(&scatter)?;
    w.write_record(["iteration", "stage", "relative_error", "residual"])?;
    for r in &trace.records {
        for (stage, pair) in [("before", r.before), ("after", r.after)] {
            if let Some((e, eps)) = pair {
                w.write_record([
                    r.iteration.to_string(),
                    stage.to_string(),
                    e.to_string(),
                    eps.to_string(),
                ])?;
            }
        }
    }
    flush(w, &scatter)?;
    Ok(vec![residuals, scatter])
}

#[allow(clippy::too_many_arguments)]
fn price(
    config: &PipelineConfig,
    params: &Path,
    instrument: Option<&Path>,
    basis_path: Option<&Path>,
    values_path: &Path,
    report_path: &Path,
    horizons: &[f64],
    mode: HorizonMode,
) -> Result<()> {
    let mut manifest = RunManifest::new("price", &config.to_json(), config.seed);
    let params_hash = manifest.input(params)?;
    if let Some(p) = instrument {
        manifest.input(p)?;
    }
    let (space, spec, problem) = setup(config, params, instrument)?;
    if horizons.last().is_none_or(|&h| (h - spec.maturity).abs() > 1e-9) {
        return Err(Error::InvalidInput(format!(
            "the last horizon must equal the maturity {}",
            spec.maturity
        )));
    }
    let basis = match basis_path {
        Some(p) => {
            manifest.input(p)?;
            let basis = load_basis(p)?;
            check_provenance(&basis.provenance, &params_hash, &instrument_hash(instrument)?)?;
            Some(basis)
        }
        None => None,
    };
    let priced = pipeline::price(&space, &problem, basis.as_ref(), horizons, mode)?;
    manifest.stage("pricing", priced.seconds);
    write_values(values_path, &priced)?;
    let engine = priced.per_horizon[0].engine;
    let mut report = ScenarioReport::new(engine, &priced.per_horizon)?;
    report.evaluation_seconds = Some(priced.seconds);
    report.basis_dim = basis.as_ref().map(|b| b.dim());
    std::fs::write(report_path, report.to_json() + "\n").map_err(|e| Error::io(report_path, e))?;
    manifest.artifact(values_path)?;
    manifest.artifact(report_path)?;
    manifest.save(report_path)?;
    print!("{}", report.table(spec.nominal));
    println!(
        "{} scenarios priced with {engine} in {:.2}s",
        space.len(),
        priced.seconds
    );
    Ok(())
}

fn check_provenance(prov: &std::collections::BTreeMap<String, String>, params: &str, instrument: &str) -> Result<()> {
    for (key, expected) in [(PARAMS_KEY, params), (INSTRUMENT_KEY, instrument)] {
        match prov.get(key) {
            Some(h) if h == expected => {}
            Some(_) => {
                return Err(Error::Provenance(format!(
                    "basis was trained on a different {}; retrain it or pass the matching file",
                    key.trim_end_matches("_sha256")
                )))
            }
            None => return Err(Error::Provenance(format!("basis carries no {key}"))),
        }
    }
    Ok(())
}

fn write_values(path: &Path, priced: &PricedScenarios) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["scenario".to_string(), "spot_rate".to_string()];
    header.extend(priced.per_horizon.iter().map(|h| format!("value_{}y", h.horizon)));
    w.write_record(&header)?;
    let first = &priced.per_horizon[0];
    for i in 0..first.values.len() {
        let mut row = vec![i.to_string(), first.spot_rates[i].to_string()];
        row.extend(priced.per_horizon.iter().map(|h| h.values[i].to_string()));
        w.write_record(&row)?;
    }
    flush(w, path)
}

fn bench(
    config: &PipelineConfig,
    params: &Path,
    instrument: Option<&Path>,
    out: &Path,
    scenarios: Option<usize>,
    hdm_sample: usize,
) -> Result<()> {
    let mut manifest = RunManifest::new("bench", &config.to_json(), config.seed);
    manifest.input(params)?;
    let (space, _, problem) = setup(config, params, instrument)?;
    let target = scenarios.unwrap_or(space.len());
    let mut reductions = Vec::new();
    let mut adaptive = None;
    for strategy in [Strategy::Classical, Strategy::Adaptive] {
        let t = Instant::now();
        let outcome = pipeline::train(&space, &problem, config, strategy)?;
        let seconds = t.elapsed().as_secs_f64();
        reductions.push(BasisTiming {
            strategy: format!("{strategy:?}").to_lowercase(),
            reduction_seconds: seconds,
            dim: outcome.basis.dim(),
            iterations: outcome.trace.records.len(),
        });
        if strategy == Strategy::Adaptive {
            adaptive = Some(outcome.basis);
        }
    }
    let basis = adaptive.expect("adaptive run");
    let end = [problem.schedule.steps];
    let sample: Vec<usize> = (0..space.len())
        .step_by((space.len() / hdm_sample.max(1)).max(1))
        .take(hdm_sample.max(1))
        .collect();
    let (hdm_time, _) = median_of_three(|| {
        sample
            .iter()
            .try_for_each(|&i| problem.solve(&space.group(i), &end).map(|_| ()))
    })?;
    let solver = RomSolver::new(&problem, &basis)?;
    let (rom_time, _) =
        median_of_three(|| (0..space.len()).try_for_each(|i| solver.solve(&space.group(i), &end, None).map(|_| ())))?;
    let bench = Benchmark {
        scenarios: target,
        grid_points: problem.size(),
        steps: problem.schedule.steps,
        hdm: EngineTiming::from_sample(hdm_time / sample.len() as f64, sample.len(), target),
        rom: EngineTiming::from_sample(rom_time / space.len() as f64, space.len(), target),
        reductions,
        threads: 1,
        timing_method: "wall clock, median of 3 sequential runs".into(),
    };
    std::fs::write(out, bench.to_json() + "\n").map_err(|e| Error::io(out, e))?;
    manifest.artifact(out)?;
    manifest.save(out)?;
    println!(
        "HDM {:.2} ms/solve, ROM {:.3} ms/solve; speedups at s = {target}: {:?}",
        bench.hdm.per_solve_seconds * 1e3,
        bench.rom.per_solve_seconds * 1e3,
        bench.speedups().iter().map(|s| format!("{s:.1}x")).collect::<Vec<_>>()
    );
    Ok(())
}
