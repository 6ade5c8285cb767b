//! Controller comparison experiments: error-profile fitting, synthesis of the controller
//! variants and seeded Monte Carlo runs under nominal and degraded perception.

use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::error_model::{epsilon_bound, residuals, s_slope_with, PerceptionBounds, TrajectoryDataset};
use crate::exec::{map_indexed, Execution};
use crate::fir::{realize_controller, SystemResponses};
use crate::lti::{quadrotor_plant, DiscreteLtiSystem, QuadrotorParams};
use crate::sim::{
    metrics_with_gamma, responses_from_impulses, simulate, smooth, CircleReference, Controller, Disturbance,
    PdController, Perception, SimLog, SyntheticPerceptionModel,
};
use crate::synthesis::{
    guarantee_report, stacked_cost, synthesize, CostSpec, GuaranteeReport, LpStats, SolverSettings, SynthesisProblem,
};

pub const PD: &str = "pd";
pub const NOMINAL_L1: &str = "nominal_l1";
pub const ROBUST_QUADRATIC: &str = "robust_quadratic";
pub const ROBUST_IMITATION: &str = "robust_imitation";
pub const CONTROLLERS: [&str; 4] = [PD, NOMINAL_L1, ROBUST_QUADRATIC, ROBUST_IMITATION];

/// Response taps used to evaluate the norms of controllers that are not FIR by construction.
pub const PD_RESPONSE_TAPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub mass: f64,
    pub g: f64,
    pub dt: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let p = QuadrotorParams::default();
        Self {
            mass: p.mass,
            g: p.g,
            dt: 0.1,
        }
    }
}

/// Where the slope entering the robustness row comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum SlopeSource {
    /// Closed-form Lipschitz constant of the synthetic bias field.
    Lipschitz,
    Fixed { value: f64 },
    /// Quantile of the pairwise slopes of the training pass.
    Fitted { quantile: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorModelConfig {
    pub radius: f64,
    pub epsilon_quantile: f64,
    pub slope: SlopeSource,
    /// Replaces the fitted error bound.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon_e: Option<f64>,
}

impl Default for ErrorModelConfig {
    fn default() -> Self {
        Self {
            radius: 5.0,
            epsilon_quantile: 1.0,
            slope: SlopeSource::Lipschitz,
            epsilon_e: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    pub eps_w: f64,
    pub d_max: f64,
    pub margin: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r0: Option<f64>,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            eps_w: 0.05,
            d_max: 0.0,
            margin: 1e-3,
            r0: None,
        }
    }
}

/// Diagonal cost weights. Missing state weights are ones; missing input weights are
/// `(g², g², 1/m²)` for the quadrotor and ones otherwise.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_diag: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_diag: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdGains {
    pub kp: [f64; 3],
    pub kd: [f64; 3],
}

impl Default for PdGains {
    fn default() -> Self {
        Self {
            kp: [4.0; 3],
            kd: [3.0; 3],
        }
    }
}

/// Bias of amplitude 0.05 and spatial frequency 6 on each measured coordinate along its own
/// state axis, plus uniform noise of amplitude 0.04.
pub fn default_perception() -> SyntheticPerceptionModel {
    let mut model = SyntheticPerceptionModel::ideal(6, 6);
    for i in 0..6 {
        model.bias_amplitudes[i] = 0.05;
        model.bias_frequencies[i] = 6.0;
        model.bias_directions[i][i] = 1.0;
    }
    model.noise_amplitude = 0.04;
    model
}

fn default_horizon() -> usize {
    20
}
fn default_runs() -> usize {
    20
}
fn default_degraded() -> f64 {
    4.0
}
fn default_smoothing() -> f64 {
    1.0
}

/// Every setting of a synthesis or simulation job. Only the seed is mandatory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub system: SystemConfig,
    /// Explicit plant replacing the quadrotor for synthesis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant: Option<DiscreteLtiSystem>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Taps kept when realising controllers; twice the horizon when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller_horizon: Option<usize>,
    #[serde(default)]
    pub error_model: ErrorModelConfig,
    #[serde(default)]
    pub robustness: RobustnessConfig,
    #[serde(default)]
    pub weights: WeightsConfig,
    #[serde(default)]
    pub pd: PdGains,
    /// Run the thrust channel of synthesized controllers on the PD law.
    #[serde(default)]
    pub z_axis_pd: bool,
    #[serde(default = "default_perception")]
    pub perception: SyntheticPerceptionModel,
    #[serde(default = "default_degraded")]
    pub degraded_factor: f64,
    #[serde(default)]
    pub reference: CircleReference,
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Steps per run; the reference length when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default = "default_smoothing")]
    pub smoothing_time_constant: f64,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub execution: Execution,
}

impl ExperimentConfig {
    pub fn new(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "seed": seed })).expect("defaults deserialize")
    }

    pub fn params(&self) -> QuadrotorParams {
        QuadrotorParams {
            mass: self.system.mass,
            g: self.system.g,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params().validate()?;
        if !(self.system.dt > 0.0 && self.system.dt.is_finite()) {
            return Err(invalid("dt", "must be positive"));
        }
        if self.horizon < 2 {
            return Err(invalid("horizon", format!("must be at least 2, got {}", self.horizon)));
        }
        if self.controller_horizon == Some(0) {
            return Err(invalid("controller_horizon", "must be positive"));
        }
        self.reference.validate()?;
        if (self.reference.dt - self.system.dt).abs() > 1e-12 {
            return Err(mismatch("reference dt", self.system.dt, self.reference.dt));
        }
        let e = &self.error_model;
        if !(e.radius > 0.0 && e.radius.is_finite()) {
            return Err(invalid("radius", "must be positive"));
        }
        if !(e.epsilon_quantile > 0.0 && e.epsilon_quantile <= 1.0) {
            return Err(invalid("epsilon_quantile", "must lie in (0, 1]"));
        }
        match e.slope {
            SlopeSource::Fixed { value } if !(value >= 0.0 && value.is_finite()) => {
                return Err(invalid("slope", "fixed value must be finite and non-negative"))
            }
            SlopeSource::Fitted { quantile } if !(quantile > 0.0 && quantile <= 1.0) => {
                return Err(invalid("slope", "quantile must lie in (0, 1]"))
            }
            _ => {}
        }
        if let Some(eps) = e.epsilon_e {
            if !(eps >= 0.0 && eps.is_finite()) {
                return Err(invalid("epsilon_e", "must be finite and non-negative"));
            }
        }
        let r = &self.robustness;
        if !(r.eps_w >= 0.0 && r.eps_w.is_finite()) {
            return Err(invalid("eps_w", "must be finite and non-negative"));
        }
        if !(r.d_max >= 0.0 && r.d_max.is_finite()) {
            return Err(invalid("d_max", "must be finite and non-negative"));
        }
        if !(r.margin > 0.0 && r.margin.is_finite()) {
            return Err(invalid("margin", "must be positive"));
        }
        PdController::new(self.pd.kp, self.pd.kd, self.params())?;
        let plant = self.plant()?;
        if self.plant.is_none() {
            self.perception.validate(plant.outputs(), plant.states())?;
        }
        self.weights(&plant)?;
        if !(self.degraded_factor >= 0.0 && self.degraded_factor.is_finite()) {
            return Err(invalid("degraded_factor", "must be finite and non-negative"));
        }
        if !(self.smoothing_time_constant >= self.system.dt) {
            return Err(invalid("smoothing_time_constant", "must be at least dt"));
        }
        Ok(())
    }

    /// The explicit plant, or the quadrotor discretised at `dt`.
    pub fn plant(&self) -> Result<DiscreteLtiSystem> {
        match &self.plant {
            Some(p) => {
                p.validate()?;
                Ok(p.clone())
            }
            None => quadrotor_plant(self.params(), self.system.dt),
        }
    }

    pub fn weights(&self, sys: &DiscreteLtiSystem) -> Result<(Vec<f64>, Vec<f64>)> {
        let (n, m) = (sys.states(), sys.inputs());
        let q = self.weights.q_diag.clone().unwrap_or_else(|| vec![1.0; n]);
        let r = match &self.weights.r_diag {
            Some(r) => r.clone(),
            None if self.plant.is_none() => {
                let p = self.params();
                vec![p.g * p.g, p.g * p.g, 1.0 / (p.mass * p.mass)]
            }
            None => vec![1.0; m],
        };
        if q.len() != n {
            return Err(mismatch("q_diag length", n, q.len()));
        }
        if r.len() != m {
            return Err(mismatch("r_diag length", m, r.len()));
        }
        Ok((q, r))
    }

    pub fn steps(&self) -> usize {
        self.steps.unwrap_or_else(|| self.reference.steps())
    }

    pub fn controller_horizon(&self) -> usize {
        self.controller_horizon.unwrap_or(2 * self.horizon)
    }

    /// Training seed followed by `(perception, disturbance)` seeds for each run.
    pub fn derived_seeds(&self) -> (u64, Vec<(u64, u64)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let training = rng.next_u64();
        let runs = (0..self.runs).map(|_| (rng.next_u64(), rng.next_u64())).collect();
        (training, runs)
    }

    /// Perception sampled at the reference states under nominal conditions.
    pub fn training_dataset(&self) -> Result<TrajectoryDataset> {
        let sys = self.plant()?;
        let (seed, _) = self.derived_seeds();
        let model = SyntheticPerceptionModel {
            seed,
            degradation_factor: 1.0,
            ..self.perception.clone()
        };
        let steps = self.steps().max(1);
        let mut times = Vec::with_capacity(steps + 1);
        let mut states = Vec::with_capacity(steps + 1);
        let mut measurements = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            let x = self.reference.state(k);
            measurements.push(model.perceive(&sys.c, &x, k));
            times.push(k as f64 * self.system.dt);
            states.push(x);
        }
        TrajectoryDataset::new(times, states, measurements)
    }

    pub fn fit(&self) -> Result<TrainingFit> {
        let sys = self.plant()?;
        let data = self.training_dataset()?;
        let errs = residuals(&data, &sys.c)?;
        let fitted_eps = epsilon_bound(&errs, self.error_model.epsilon_quantile)?;
        let epsilon_e = self.error_model.epsilon_e.unwrap_or(fitted_eps);
        let lipschitz = self.perception.lipschitz();
        let slope = match self.error_model.slope {
            SlopeSource::Lipschitz => lipschitz,
            SlopeSource::Fixed { value } => value,
            SlopeSource::Fitted { quantile } => {
                s_slope_with(&data, &sys.c, self.error_model.radius, quantile, self.execution)?
            }
        };
        Ok(TrainingFit {
            samples: data.len(),
            fitted_epsilon_e: fitted_eps,
            epsilon_e,
            slope,
            lipschitz,
            radius: self.error_model.radius,
            r0: self.robustness.r0.unwrap_or(epsilon_e),
        })
    }

    pub fn problem(&self, bounds: PerceptionBounds, robust: bool, cost: CostSpec) -> Result<SynthesisProblem> {
        Ok(SynthesisProblem {
            sys: self.plant()?,
            horizon: self.horizon,
            eps_w: self.robustness.eps_w,
            bounds,
            d_max: self.robustness.d_max,
            robustness_enabled: robust,
            margin: self.robustness.margin,
            r0: self.robustness.r0,
            cost,
            solver: self.solver,
        })
    }

    pub fn quadratic_cost(&self) -> Result<CostSpec> {
        let (q, r) = self.weights(&self.plant()?)?;
        Ok(CostSpec::quadratic(q, r))
    }

    pub fn pd_controller(&self) -> Result<PdController> {
        PdController::new(self.pd.kp, self.pd.kd, self.params())
    }

    fn wrap(&self, k: crate::fir::FirController) -> Result<Controller> {
        Ok(Controller::Fir {
            controller: k,
            z_axis_pd: if self.z_axis_pd { Some(self.pd_controller()?) } else { None },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingFit {
    pub samples: usize,
    pub fitted_epsilon_e: f64,
    pub epsilon_e: f64,
    pub slope: f64,
    pub lipschitz: f64,
    pub radius: f64,
    pub r0: f64,
}

impl TrainingFit {
    pub fn bounds(&self) -> PerceptionBounds {
        PerceptionBounds {
            slope: self.slope,
            epsilon_e: self.epsilon_e,
            radius: self.radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignStatus {
    Ok,
    Infeasible,
    SolverFailure,
    /// The design it depends on failed.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSummary {
    pub name: String,
    pub status: DesignStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guarantee: Option<GuaranteeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lp: Option<LpStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truncation_tail_norm: Option<f64>,
}

/// A controller ready to simulate, with the responses it was designed or measured from.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub name: String,
    pub controller: Controller,
    pub responses: SystemResponses,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub perception_seed: u64,
    pub disturbance_seed: u64,
    pub tracking_rmse: f64,
    pub max_error: f64,
    pub mean_error: f64,
    pub gamma: Option<f64>,
    pub bound_satisfied: bool,
    /// Step at which the state stopped being finite.
    pub diverged_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub controller: String,
    pub condition: String,
    pub degradation_factor: f64,
    pub runs: Vec<RunRecord>,
    pub mean_max_error: Option<f64>,
    pub mean_tracking_rmse: Option<f64>,
    pub bound_satisfied_runs: usize,
    pub all_bound_satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub runs: usize,
    pub steps: usize,
    pub training: TrainingFit,
    pub controllers: Vec<ControllerSummary>,
    pub cells: Vec<Cell>,
}

impl ExperimentReport {
    pub fn cell(&self, controller: &str, condition: &str) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.controller == controller && c.condition == condition)
    }
}

/// First run of one cell, kept for the figure files.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub controller: String,
    pub condition: String,
    pub gamma: Option<f64>,
    pub log: SimLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub designs: Vec<Design>,
    pub traces: Vec<Trace>,
}

pub const CONDITIONS: [(&str, bool); 2] = [("nominal", false), ("degraded", true)];

/// Synthesizes the three FIR variants and measures the PD baseline.
pub fn build_designs(config: &ExperimentConfig, fit: &TrainingFit) -> Result<(Vec<ControllerSummary>, Vec<Design>)> {
    let sys = config.plant()?;
    let params = config.params();
    let bounds = fit.bounds();
    let mut summaries = Vec::new();
    let mut designs = Vec::new();

    let pd = Controller::Pd {
        pd: config.pd_controller()?,
    };
    let pd_resp = responses_from_impulses(&sys, &params, &pd, PD_RESPONSE_TAPS)?;
    let pd_problem = config.problem(bounds, false, config.quadratic_cost()?)?;
    let pd_report = guarantee_report(&pd_problem, &pd_resp, stacked_cost(&pd_problem, &pd_resp)?);
    summaries.push(ControllerSummary {
        name: PD.into(),
        status: DesignStatus::Ok,
        message: None,
        guarantee: Some(pd_report.clone()),
        lp: None,
        truncation_tail_norm: None,
    });
    designs.push(Design {
        name: PD.into(),
        controller: pd,
        responses: pd_resp,
        gamma: pd_report.gamma,
    });

    let mut nominal: Option<SystemResponses> = None;
    for name in [NOMINAL_L1, ROBUST_QUADRATIC, ROBUST_IMITATION] {
        let cost = match name {
            ROBUST_IMITATION => match &nominal {
                Some(n) => {
                    let (q, r) = config.weights(&sys)?;
                    CostSpec::imitation(q, r, n.clone())
                }
                None => {
                    summaries.push(ControllerSummary {
                        name: name.into(),
                        status: DesignStatus::Skipped,
                        message: Some(format!("{NOMINAL_L1} design unavailable")),
                        guarantee: None,
                        lp: None,
                        truncation_tail_norm: None,
                    });
                    continue;
                }
            },
            _ => config.quadratic_cost()?,
        };
        let problem = config.problem(bounds, name != NOMINAL_L1, cost)?;
        match synthesize(&problem) {
            Ok(out) => {
                let k = realize_controller(&out.responses, config.controller_horizon())?;
                summaries.push(ControllerSummary {
                    name: name.into(),
                    status: DesignStatus::Ok,
                    message: None,
                    guarantee: Some(out.report.clone()),
                    lp: Some(out.lp),
                    truncation_tail_norm: Some(k.truncation_tail_norm),
                });
                if name == NOMINAL_L1 {
                    nominal = Some(out.responses.clone());
                }
                designs.push(Design {
                    name: name.into(),
                    controller: config.wrap(k)?,
                    responses: out.responses,
                    gamma: out.report.gamma,
                });
            }
            Err(e @ (Error::Infeasible(_) | Error::Solver(_))) => {
                let status = if matches!(e, Error::Infeasible(_)) {
                    DesignStatus::Infeasible
                } else {
                    DesignStatus::SolverFailure
                };
                log::warn!("{name}: {e}");
                summaries.push(ControllerSummary {
                    name: name.into(),
                    status,
                    message: Some(e.to_string()),
                    guarantee: None,
                    lp: None,
                    truncation_tail_norm: None,
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok((summaries, designs))
}

/// One seeded closed-loop run. Divergent runs are reported with the metrics of their finite prefix.
pub fn simulate_run(
    config: &ExperimentConfig,
    controller: &Controller,
    gamma: Option<f64>,
    factor: f64,
    run: usize,
    seeds: (u64, u64),
) -> Result<(RunRecord, SimLog)> {
    let sys = config.plant()?;
    let model = SyntheticPerceptionModel {
        seed: seeds.0,
        degradation_factor: factor,
        ..config.perception.clone()
    };
    let disturbance = Disturbance::Uniform {
        bound: config.robustness.eps_w,
        seed: seeds.1,
    };
    let result = simulate(
        &sys,
        &config.params(),
        controller,
        &config.reference,
        &Perception::Synthetic(model),
        &disturbance,
        config.steps(),
    );
    let (log, diverged_at) = match result {
        Ok(log) => (log, None),
        Err(Error::NonFiniteState { step, log }) => (*log, Some(step)),
        Err(e) => return Err(e),
    };
    let m = metrics_with_gamma(&log, gamma)?;
    Ok((
        RunRecord {
            run,
            perception_seed: seeds.0,
            disturbance_seed: seeds.1,
            tracking_rmse: m.tracking_rmse,
            max_error: m.max_error,
            mean_error: m.mean_error,
            gamma,
            bound_satisfied: m.bound_satisfied && diverged_at.is_none(),
            diverged_at,
        },
        log,
    ))
}

/// All seeded runs of one controller at one degradation factor, in run order.
pub fn run_batch(
    config: &ExperimentConfig,
    controller: &Controller,
    gamma: Option<f64>,
    factor: f64,
    exec: Execution,
) -> Result<Vec<RunRecord>> {
    let (_, seeds) = config.derived_seeds();
    map_indexed(seeds.len(), exec, |i| {
        simulate_run(config, controller, gamma, factor, i, seeds[i]).map(|r| r.0)
    })
    .into_iter()
    .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Fits the error profile, designs the four controllers and runs every
/// controller × condition × seed combination.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let sys = config.plant()?;
    if sys.states() != 6 || sys.inputs() != 3 {
        return Err(mismatch(
            "experiment plant (states, inputs)",
            "(6, 3)",
            format!("({}, {})", sys.states(), sys.inputs()),
        ));
    }
    let fit = config.fit()?;
    let (summaries, designs) = build_designs(config, &fit)?;
    let (_, seeds) = config.derived_seeds();

    let runs = seeds.len();
    let jobs: Vec<(usize, usize, usize)> = (0..designs.len())
        .flat_map(|d| (0..CONDITIONS.len()).flat_map(move |c| (0..runs).map(move |r| (d, c, r))))
        .collect();
    let results = map_indexed(jobs.len(), config.execution, |j| {
        let (d, c, r) = jobs[j];
        let factor = if CONDITIONS[c].1 { config.degraded_factor } else { 1.0 };
        simulate_run(config, &designs[d].controller, designs[d].gamma, factor, r, seeds[r])
            .map(|(rec, log)| (rec, (r == 0).then_some(log)))
    });

    let mut results = results.into_iter();
    let mut cells = Vec::new();
    let mut traces = Vec::new();
    for name in CONTROLLERS {
        let design = designs.iter().find(|d| d.name == name);
        for (condition, degraded) in CONDITIONS {
            let factor = if degraded { config.degraded_factor } else { 1.0 };
            let mut runs = Vec::new();
            if let Some(design) = design {
                for _ in 0..seeds.len() {
                    let (rec, log) = results.next().expect("one result per job")?;
                    if let Some(log) = log {
                        traces.push(Trace {
                            controller: name.into(),
                            condition: condition.into(),
                            gamma: design.gamma,
                            log,
                        });
                    }
                    runs.push(rec);
                }
            }
            let satisfied = runs.iter().filter(|r| r.bound_satisfied).count();
            cells.push(Cell {
                controller: name.into(),
                condition: condition.into(),
                degradation_factor: factor,
                mean_max_error: mean(runs.iter().map(|r| r.max_error)),
                mean_tracking_rmse: mean(runs.iter().map(|r| r.tracking_rmse)),
                bound_satisfied_runs: satisfied,
                all_bound_satisfied: !runs.is_empty() && satisfied == runs.len(),
                runs,
            });
        }
    }
    Ok(ExperimentOutcome {
        report: ExperimentReport {
            seed: config.seed,
            runs: config.runs,
            steps: config.steps(),
            training: fit,
            controllers: summaries,
            cells,
        },
        designs,
        traces,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn flush<W: Write>(w: &mut csv::Writer<W>, what: &str) -> Result<()> {
    w.flush().map_err(|source| Error::Io {
        path: what.into(),
        source,
    })
}

impl ExperimentOutcome {
    /// Position and reference of the first run of every cell.
    pub fn write_tracking_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["controller", "condition", "t", "x", "y", "z", "x_ref", "y_ref", "z_ref"])?;
        for tr in &self.traces {
            for k in 0..tr.log.len() {
                let mut row = vec![tr.controller.clone(), tr.condition.clone(), tr.log.times[k].to_string()];
                row.extend((0..3).map(|i| tr.log.x[k][i].to_string()));
                row.extend((0..3).map(|i| tr.log.x_ref[k][i].to_string()));
                w.write_record(row)?;
            }
        }
        flush(&mut w, "<tracking figure>")
    }

    /// Raw and smoothed perception error norm of the first run of every cell, with the bound line.
    pub fn write_error_norm_csv<W: Write>(&self, writer: W, dt: f64, time_constant: f64) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["controller", "condition", "t", "enorm", "enorm_smoothed", "gamma"])?;
        for tr in &self.traces {
            let smoothed = smooth(&tr.log.e_norm, dt, time_constant)?;
            for k in 0..tr.log.len() {
                w.write_record([
                    tr.controller.clone(),
                    tr.condition.clone(),
                    tr.log.times[k].to_string(),
                    tr.log.e_norm[k].to_string(),
                    smoothed[k].to_string(),
                    opt(tr.gamma),
                ])?;
            }
        }
        flush(&mut w, "<error norm figure>")
    }

    pub fn write_runs_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "controller",
            "condition",
            "run",
            "perception_seed",
            "disturbance_seed",
            "tracking_rmse",
            "max_error",
            "mean_error",
            "gamma",
            "bound_satisfied",
            "diverged_at",
        ])?;
        for cell in &self.report.cells {
            for r in &cell.runs {
                w.write_record([
                    cell.controller.clone(),
                    cell.condition.clone(),
                    r.run.to_string(),
                    r.perception_seed.to_string(),
                    r.disturbance_seed.to_string(),
                    r.tracking_rmse.to_string(),
                    r.max_error.to_string(),
                    r.mean_error.to_string(),
                    opt(r.gamma),
                    r.bound_satisfied.to_string(),
                    r.diverged_at.map(|s| s.to_string()).unwrap_or_default(),
                ])?;
            }
        }
        flush(&mut w, "<run summary>")
    }
}

/// Whether the problem admits a solution; infeasibility is an answer, other failures are errors.
pub fn is_feasible(problem: &SynthesisProblem) -> Result<bool> {
    match synthesize(problem) {
        Ok(_) => Ok(true),
        Err(Error::Infeasible(_)) => Ok(false),
        Err(e) => Err(e),
    }
}

/// Feasibility of the problem at each slope.
pub fn feasibility_sweep(problem: &SynthesisProblem, slopes: &[f64], exec: Execution) -> Result<Vec<bool>> {
    map_indexed(slopes.len(), exec, |i| {
        let mut p = problem.clone();
        p.bounds.slope = slopes[i];
        is_feasible(&p)
    })
    .into_iter()
    .collect()
}

/// Bisection for the largest feasible slope in `[lo, hi]`, given `lo` feasible and `hi`
/// infeasible. Returns the final `(feasible, infeasible)` bracket.
pub fn slope_feasibility_edge(problem: &SynthesisProblem, lo: f64, hi: f64, iterations: usize) -> Result<(f64, f64)> {
    let at = |s: f64| {
        let mut p = problem.clone();
        p.bounds.slope = s;
        is_feasible(&p)
    };
    if !at(lo)? {
        return Err(invalid("slope", format!("lower bracket {lo} is infeasible")));
    }
    if at(hi)? {
        return Err(invalid("slope", format!("upper bracket {hi} is feasible")));
    }
    let (mut lo, mut hi) = (lo, hi);
    for _ in 0..iterations {
        let mid = 0.5 * (lo + hi);
        if at(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo, hi))
}
