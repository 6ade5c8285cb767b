//! One function per subcommand. Each writes its artifacts through an [`OutputDir`] and leaves a
//! manifest behind, also when it fails after writing something.

use std::path::Path;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sls_core::error_model::{self, ErrorModel, PerceptionBounds, TrajectoryDataset};
use sls_core::experiment::{run_experiment, simulate_run, ExperimentConfig, SlopeSource};
use sls_core::fir::{realize_controller, FirController, SystemResponses};
use sls_core::sim::{impulse_response, Controller, ImpulseChannel};
use sls_core::synthesis::{
    diagnose_robustness, guarantee_report, left_residual, right_residual, stacked_cost, synthesize, tap_residual,
    CostSpec, GuaranteeReport, LpStats,
};
use sls_core::Error;

use crate::config::{load, Loaded};
use crate::error::{CliError, Result};
use crate::output::{read_json, OutputDir};
use crate::{Cli, Command, DesignKind, ImpulseKind};

/// Slope quantile used when neither the flag nor the configuration names one.
pub const DEFAULT_SLOPE_QUANTILE: f64 = 0.95;
/// Tolerance of the offline achievability and robustness checks.
pub const VERIFY_TOL: f64 = 1e-7;
/// Unit-circle points used by `verify`.
pub const Z_POINTS: usize = 10;

pub fn dispatch(cli: &Cli) -> Result<()> {
    let loaded = load(cli.common.config.as_deref(), cli.common.seed)?;
    let mut out = OutputDir::create(&cli.common.out, cli.command.name(), &loaded.canonical_json())?;
    out.write_json("config.json", &loaded.config)?;
    let quiet = cli.common.quiet;
    let result = match &cli.command {
        Command::FitError { dataset, quantile } => fit_error(&loaded, &mut out, dataset.as_deref(), *quantile, quiet),
        Command::Synthesize { design, error_model } => {
            synthesize_cmd(&loaded, &mut out, *design, error_model.as_deref(), quiet)
        }
        Command::Simulate {
            controller,
            guarantee,
            degradation,
            steps,
            impulse,
            index,
        } => simulate_cmd(
            &loaded,
            &mut out,
            SimulateArgs {
                controller: controller.as_deref(),
                guarantee: guarantee.as_deref(),
                degradation: *degradation,
                steps: *steps,
                impulse: *impulse,
                index: *index,
            },
            quiet,
        ),
        Command::Experiment => experiment_cmd(&loaded, &mut out, quiet),
        Command::Verify {
            responses,
            error_model,
            skip_robustness,
        } => verify_cmd(&loaded, &mut out, responses, error_model.as_deref(), *skip_robustness, quiet),
    };
    out.finish()?;
    result
}

macro_rules! say {
    ($quiet:expr, $($arg:tt)*) => {
        if !$quiet {
            println!($($arg)*);
        }
    };
}

pub fn fit_error(
    loaded: &Loaded,
    out: &mut OutputDir,
    dataset: Option<&Path>,
    quantile: Option<f64>,
    quiet: bool,
) -> Result<()> {
    let config = &loaded.config;
    let sys = config.plant()?;
    let data = match dataset {
        Some(path) => TrajectoryDataset::read_csv_file(path)?,
        None => {
            loaded.require_seed("fit-error")?;
            let data = config.training_dataset()?;
            out.write_with("training.csv", |buf| data.write_csv(buf))?;
            data
        }
    };
    if data.state_dim() != sys.states() || data.measurement_dim() != sys.outputs() {
        return Err(Error::DimensionMismatch {
            context: "dataset (states, measurements)",
            expected: format!("({}, {})", sys.states(), sys.outputs()),
            actual: format!("({}, {})", data.state_dim(), data.measurement_dim()),
        }
        .into());
    }
    let q_slope = quantile.unwrap_or(match config.error_model.slope {
        SlopeSource::Fitted { quantile } => quantile,
        _ => DEFAULT_SLOPE_QUANTILE,
    });
    let model = error_model::fit_with(
        &data,
        &sys.c,
        config.error_model.radius,
        config.error_model.epsilon_quantile,
        q_slope,
        config.execution,
    )?;
    out.write_json("error_model.json", &model)?;
    say!(quiet, "samples          {}", data.len());
    say!(quiet, "epsilon_e        {}", model.epsilon_e);
    say!(quiet, "S-slope (q=1)    {}", model.s_hat_max);
    say!(quiet, "S-slope (q={q_slope})  {}", model.s_hat);
    Ok(())
}

/// Bounds entering the robustness row: an error-model file, explicit configuration values, or
/// the synthetic training pass, in that order.
pub fn perception_bounds(loaded: &Loaded, error_model: Option<&Path>, command: &str) -> Result<PerceptionBounds> {
    let config = &loaded.config;
    if let Some(path) = error_model {
        let model: ErrorModel = read_json(path)?;
        let bounds = model.bounds();
        bounds.validate()?;
        return Ok(bounds);
    }
    let e = &config.error_model;
    let explicit_slope = match e.slope {
        SlopeSource::Fixed { value } => Some(value),
        SlopeSource::Lipschitz if config.plant.is_none() => Some(config.perception.lipschitz()),
        _ => None,
    };
    if let (Some(slope), Some(epsilon_e)) = (explicit_slope, e.epsilon_e) {
        return Ok(PerceptionBounds {
            slope,
            epsilon_e,
            radius: e.radius,
        });
    }
    if config.plant.is_some() {
        return Err(CliError::Config(
            "an explicit plant needs a fixed slope and epsilon_e, or --error-model".into(),
        ));
    }
    loaded.require_seed(command)?;
    Ok(config.fit()?.bounds())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSummary {
    pub design: String,
    pub bounds: PerceptionBounds,
    pub lp: LpStats,
    pub controller_horizon: usize,
    pub truncation_tail_norm: f64,
}

fn design_name(design: DesignKind) -> &'static str {
    match design {
        DesignKind::NominalL1 => sls_core::experiment::NOMINAL_L1,
        DesignKind::RobustQuadratic => sls_core::experiment::ROBUST_QUADRATIC,
        DesignKind::RobustImitation => sls_core::experiment::ROBUST_IMITATION,
    }
}

pub fn synthesize_cmd(
    loaded: &Loaded,
    out: &mut OutputDir,
    design: DesignKind,
    error_model: Option<&Path>,
    quiet: bool,
) -> Result<()> {
    let config = &loaded.config;
    let bounds = perception_bounds(loaded, error_model, "synthesize")?;
    let quadratic = config.quadratic_cost()?;
    let problem = match design {
        DesignKind::NominalL1 => config.problem(bounds, false, quadratic)?,
        DesignKind::RobustQuadratic => config.problem(bounds, true, quadratic)?,
        DesignKind::RobustImitation => {
            let nominal = synthesize(&config.problem(bounds, false, quadratic.clone())?)?;
            let cost = CostSpec::imitation(quadratic.q_diag, quadratic.r_diag, nominal.responses);
            config.problem(bounds, true, cost)?
        }
    };
    let outcome = match synthesize(&problem) {
        Ok(o) => o,
        Err(Error::Infeasible(mut report)) => {
            if !report.structural {
                match diagnose_robustness(&problem) {
                    Ok(diag) => report = Box::new(diag),
                    Err(e) => log::warn!("robustness diagnosis failed: {e}"),
                }
            }
            out.write_json("infeasibility.json", &report)?;
            say!(quiet, "infeasible: {report}");
            return Err(Error::Infeasible(report).into());
        }
        Err(e) => return Err(e.into()),
    };
    let horizon = config.controller_horizon();
    let controller = realize_controller(&outcome.responses, horizon)?;
    out.write_json("responses.json", &outcome.responses)?;
    out.write_json("controller.json", &controller)?;
    out.write_json("guarantee.json", &outcome.report)?;
    out.write_json(
        "synthesis.json",
        &SynthesisSummary {
            design: design_name(design).into(),
            bounds,
            lp: outcome.lp,
            controller_horizon: horizon,
            truncation_tail_norm: controller.truncation_tail_norm,
        },
    )?;
    let r = &outcome.report;
    say!(quiet, "design           {}", design_name(design));
    say!(quiet, "cost             {}", r.cost);
    say!(quiet, "|Phi_xe|         {}", r.phi_xe_norm);
    say!(quiet, "|Phi_xw|         {}", r.phi_xw_norm);
    say!(quiet, "robustness       {} <= {} (margin {})", r.robustness_lhs, r.robustness_rhs, r.feasibility_margin);
    match r.gamma {
        Some(g) => say!(quiet, "gamma            {g}"),
        None => say!(quiet, "gamma            undefined"),
    }
    say!(quiet, "truncation tail  {}", controller.truncation_tail_norm);
    Ok(())
}

pub struct SimulateArgs<'a> {
    pub controller: Option<&'a Path>,
    pub guarantee: Option<&'a Path>,
    pub degradation: Option<f64>,
    pub steps: Option<usize>,
    pub impulse: Option<ImpulseKind>,
    pub index: usize,
}

fn load_controller(config: &ExperimentConfig, path: Option<&Path>) -> Result<Controller> {
    Ok(match path {
        Some(p) => {
            let fir: FirController = read_json(p)?;
            Controller::Fir {
                controller: fir,
                z_axis_pd: if config.z_axis_pd { Some(config.pd_controller()?) } else { None },
            }
        }
        None => Controller::Pd {
            pd: config.pd_controller()?,
        },
    })
}

pub fn simulate_cmd(loaded: &Loaded, out: &mut OutputDir, args: SimulateArgs<'_>, quiet: bool) -> Result<()> {
    let mut config = loaded.config.clone();
    if let Some(steps) = args.steps {
        config.steps = Some(steps);
    }
    let sys = config.plant()?;
    let controller = load_controller(&config, args.controller)?;

    if let Some(kind) = args.impulse {
        let channel = match kind {
            ImpulseKind::State => ImpulseChannel::State,
            ImpulseKind::Measurement => ImpulseChannel::Measurement,
        };
        let steps = args.steps.unwrap_or(config.horizon);
        let resp = impulse_response(&sys, &config.params(), &controller, channel, args.index, steps)?;
        out.write_with("impulse.csv", |buf| write_impulse_csv(buf, &resp.states, &resp.inputs))?;
        say!(quiet, "impulse response over {} steps written", steps + 1);
        return Ok(());
    }

    loaded.require_seed("simulate")?;
    config.runs = config.runs.max(1);
    let (_, seeds) = config.derived_seeds();
    let gamma = match args.guarantee {
        Some(p) => read_json::<GuaranteeReport>(p)?.gamma,
        None => None,
    };
    let factor = args.degradation.unwrap_or(1.0);
    if !(factor >= 0.0 && factor.is_finite()) {
        return Err(CliError::Config(format!("degradation must be finite and non-negative, got {factor}")));
    }
    let (record, log) = simulate_run(&config, &controller, gamma, factor, 0, seeds[0])?;
    out.write_with("sim.csv", |buf| log.write_csv(buf))?;
    if !log.is_empty() {
        let data = TrajectoryDataset::new(log.times.clone(), log.x.clone(), log.y.clone())?;
        out.write_with("dataset.csv", |buf| data.write_csv(buf))?;
    }
    out.write_json("metrics.json", &record)?;
    if let Some(step) = record.diverged_at {
        return Err(CliError::Diverged { step });
    }
    say!(quiet, "steps            {}", log.len());
    say!(quiet, "tracking rmse    {}", record.tracking_rmse);
    say!(quiet, "max |e|          {}", record.max_error);
    if let Some(g) = gamma {
        say!(quiet, "gamma            {g} ({})", if record.bound_satisfied { "satisfied" } else { "violated" });
    }
    Ok(())
}

fn write_impulse_csv(
    buf: &mut Vec<u8>,
    states: &[DVector<f64>],
    inputs: &[DVector<f64>],
) -> sls_core::Result<()> {
    let n = states.first().map_or(0, |v| v.len());
    let m = inputs.first().map_or(0, |v| v.len());
    let mut w = csv::Writer::from_writer(buf);
    let mut header = vec!["k".to_string()];
    header.extend((0..n).map(|i| format!("dx{i}")));
    header.extend((0..m).map(|i| format!("du{i}")));
    w.write_record(&header)?;
    for (k, (x, u)) in states.iter().zip(inputs).enumerate() {
        let mut row = vec![k.to_string()];
        row.extend(x.iter().map(f64::to_string));
        row.extend(u.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<impulse response>".into(),
        source,
    })
}

pub fn experiment_cmd(loaded: &Loaded, out: &mut OutputDir, quiet: bool) -> Result<()> {
    loaded.require_seed("experiment")?;
    let config = &loaded.config;
    let outcome = run_experiment(config)?;
    out.write_json("report.json", &outcome.report)?;
    out.write_with("runs.csv", |buf| outcome.write_runs_csv(buf))?;
    out.write_with("tracking.csv", |buf| outcome.write_tracking_csv(buf))?;
    out.write_with("error_norm.csv", |buf| {
        outcome.write_error_norm_csv(buf, config.system.dt, config.smoothing_time_constant)
    })?;
    if !quiet {
        let t = &outcome.report.training;
        println!("epsilon_e {}  slope {}  radius {}  r0 {}", t.epsilon_e, t.slope, t.radius, t.r0);
        for c in &outcome.report.controllers {
            let gamma = c.guarantee.as_ref().and_then(|g| g.gamma);
            println!("{:<18} {:?}  gamma {}", c.name, c.status, gamma.map_or("-".into(), |g| format!("{g:.6}")));
        }
        println!("{:<18} {:<9} {:>12} {:>12} {:>8}", "controller", "condition", "max |e|", "rmse", "bound");
        for cell in &outcome.report.cells {
            let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
            println!(
                "{:<18} {:<9} {:>12} {:>12} {:>4}/{:<3}",
                cell.controller,
                cell.condition,
                f(cell.mean_max_error),
                f(cell.mean_tracking_rmse),
                cell.bound_satisfied_runs,
                cell.runs.len()
            );
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub tap_residual: f64,
    pub z_points: Vec<[f64; 2]>,
    pub left_residual: f64,
    pub right_residual: f64,
    pub achievable: bool,
    pub robustness: Option<RobustnessCheck>,
    pub guarantee: Option<GuaranteeReport>,
}

/// `count` points on the unit circle drawn from `seed`.
pub fn unit_circle_points(seed: u64, count: usize) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Complex64::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect()
}

pub fn verify_cmd(
    loaded: &Loaded,
    out: &mut OutputDir,
    responses: &Path,
    error_model: Option<&Path>,
    skip_robustness: bool,
    quiet: bool,
) -> Result<()> {
    let config = &loaded.config;
    let sys = config.plant()?;
    let resp: SystemResponses = read_json(responses)?;
    resp.validate(sys.states(), sys.inputs(), sys.outputs())?;
    let tap = tap_residual(&sys, &resp);
    let points = unit_circle_points(config.seed, Z_POINTS);
    let left = points.iter().map(|&z| left_residual(&sys, &resp, z)).fold(0.0, f64::max);
    let right = points.iter().map(|&z| right_residual(&sys, &resp, z)).fold(0.0, f64::max);
    let achievable = tap <= VERIFY_TOL && left <= VERIFY_TOL && right <= VERIFY_TOL;

    let (robustness, guarantee) = if skip_robustness {
        (None, None)
    } else {
        let bounds = perception_bounds(loaded, error_model, "verify")?;
        let mut problem = config.problem(bounds, true, config.quadratic_cost()?)?;
        problem.horizon = resp.horizon.max(2);
        let report = guarantee_report(&problem, &resp, stacked_cost(&problem, &resp)?);
        let check = RobustnessCheck {
            lhs: report.robustness_lhs,
            rhs: report.robustness_rhs,
            satisfied: report.robustness_lhs <= report.robustness_rhs + VERIFY_TOL,
        };
        (Some(check), Some(report))
    };
    let report = VerifyReport {
        tap_residual: tap,
        z_points: points.iter().map(|z| [z.re, z.im]).collect(),
        left_residual: left,
        right_residual: right,
        achievable,
        robustness,
        guarantee,
    };
    out.write_json("verify.json", &report)?;
    say!(quiet, "tap residual     {tap:e}");
    say!(quiet, "z residuals      {left:e} / {right:e}");
    if let Some(r) = &report.robustness {
        say!(quiet, "robustness       {} <= {} ({})", r.lhs, r.rhs, if r.satisfied { "ok" } else { "violated" });
    }
    let mut failures = Vec::new();
    if !achievable {
        failures.push(format!("achievability residual {:e} exceeds {VERIFY_TOL:e}", tap.max(left).max(right)));
    }
    if let Some(r) = report.robustness.as_ref().filter(|r| !r.satisfied) {
        failures.push(format!("robustness row {} exceeds {}", r.lhs, r.rhs));
    }
    if failures.is_empty() {
        say!(quiet, "verified");
        Ok(())
    } else {
        Err(CliError::Verification(failures.join("; ")))
    }
}
