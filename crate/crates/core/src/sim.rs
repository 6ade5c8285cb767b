//! Closed-loop quadrotor simulation with synthetic perception, baseline PD control and metrics.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::error_model::inf_norm;
use crate::fir::{FirController, FirOperator, MeasurementHistory, SystemResponses};
use crate::lti::{DiscreteLtiSystem, QuadrotorParams};
use crate::synthesis::GuaranteeReport;

/// Constant-height circle traversed at constant angular rate, starting at `(radius, 0, height)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CircleReference {
    pub radius: f64,
    pub period: f64,
    pub height: f64,
    pub dt: f64,
    pub laps: f64,
}

impl Default for CircleReference {
    fn default() -> Self {
        Self {
            radius: 1.0,
            period: 10.0,
            height: 1.0,
            dt: 0.1,
            laps: 3.0,
        }
    }
}

impl CircleReference {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            return Err(invalid("radius", "must be finite and non-negative"));
        }
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(invalid("period", "must be positive"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid("dt", "must be positive"));
        }
        if !(self.laps >= 0.0 && self.laps.is_finite() && self.height.is_finite()) {
            return Err(invalid("laps", "must be finite and non-negative"));
        }
        Ok(())
    }

    /// Steps needed to cover the configured number of laps.
    pub fn steps(&self) -> usize {
        (self.laps * self.period / self.dt).round() as usize
    }

    fn step_angle(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.dt / self.period
    }

    /// Tangential speed that makes the sampled circle an exact trajectory of the held-input
    /// double integrator. Slightly above `2πR/period`.
    pub fn speed(&self) -> f64 {
        2.0 * self.radius * (0.5 * self.step_angle()).tan() / self.dt
    }

    /// Reference state `(p, v)` at step `k`.
    pub fn state(&self, k: usize) -> DVector<f64> {
        let angle = self.step_angle() * k as f64;
        let (s, c) = angle.sin_cos();
        let v = self.speed();
        DVector::from_vec(vec![self.radius * c, self.radius * s, self.height, -v * s, v * c, 0.0])
    }
}

/// Reference state and feedforward input at step `k`.
///
/// The feedforward holds the acceleration `(v[k+1] − v[k]) / dt` over the step, mapped through
/// the inverse of the hover input map, so the unperturbed plant follows the reference exactly.
pub fn reference_signal(reference: &CircleReference, params: &QuadrotorParams, k: usize) -> (DVector<f64>, DVector<f64>) {
    let now = reference.state(k);
    let next = reference.state(k + 1);
    let acc: Vec<f64> = (0..3).map(|i| (next[3 + i] - now[3 + i]) / reference.dt).collect();
    let u = DVector::from_vec(vec![
        -acc[0] / params.g,
        acc[1] / params.g,
        params.mass * (params.g + acc[2]),
    ]);
    (now, u)
}

/// Bias field plus bounded uniform noise standing in for a learned perception module.
///
/// Measurement coordinate `i` is biased by `amplitude_i · sin(frequency_i · ⟨direction_i, x⟩ + phase_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticPerceptionModel {
    pub bias_amplitudes: Vec<f64>,
    pub bias_frequencies: Vec<f64>,
    pub bias_directions: Vec<Vec<f64>>,
    pub bias_phases: Vec<f64>,
    pub noise_amplitude: f64,
    #[serde(default = "one")]
    pub degradation_factor: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl SyntheticPerceptionModel {
    /// No bias, no noise.
    pub fn ideal(outputs: usize, states: usize) -> Self {
        Self {
            bias_amplitudes: vec![0.0; outputs],
            bias_frequencies: vec![0.0; outputs],
            bias_directions: vec![vec![0.0; states]; outputs],
            bias_phases: vec![0.0; outputs],
            noise_amplitude: 0.0,
            degradation_factor: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self, outputs: usize, states: usize) -> Result<()> {
        for (name, len) in [
            ("bias_amplitudes", self.bias_amplitudes.len()),
            ("bias_frequencies", self.bias_frequencies.len()),
            ("bias_directions", self.bias_directions.len()),
            ("bias_phases", self.bias_phases.len()),
        ] {
            if len != outputs {
                return Err(mismatch(name, outputs, len));
            }
        }
        if let Some(d) = self.bias_directions.iter().find(|d| d.len() != states) {
            return Err(mismatch("bias direction", states, d.len()));
        }
        let finite = self
            .bias_amplitudes
            .iter()
            .chain(&self.bias_frequencies)
            .chain(&self.bias_phases)
            .chain(self.bias_directions.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(invalid("perception", "bias parameters must be finite"));
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude.is_finite()) {
            return Err(invalid("noise_amplitude", "must be finite and non-negative"));
        }
        if !(self.degradation_factor >= 0.0 && self.degradation_factor.is_finite()) {
            return Err(invalid("degradation_factor", "must be finite and non-negative"));
        }
        Ok(())
    }

    /// `∞`-norm Lipschitz constant of the bias field.
    pub fn lipschitz(&self) -> f64 {
        self.bias_amplitudes
            .iter()
            .zip(&self.bias_frequencies)
            .zip(&self.bias_directions)
            .map(|((a, f), d)| (a * f).abs() * d.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Bound on each noise coordinate.
    pub fn noise_bound(&self) -> f64 {
        self.noise_amplitude * self.degradation_factor
    }

    /// Bound on `∥e∥∞` over all states.
    pub fn error_bound(&self) -> f64 {
        self.bias_amplitudes.iter().fold(0.0, |m: f64, a| m.max(a.abs())) + self.noise_bound()
    }

    pub fn bias(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.bias_amplitudes.len(),
            (0..self.bias_amplitudes.len()).map(|i| {
                let arg: f64 = self.bias_directions[i].iter().zip(x.iter()).map(|(d, v)| d * v).sum();
                self.bias_amplitudes[i] * (self.bias_frequencies[i] * arg + self.bias_phases[i]).sin()
            }),
        )
    }

    /// Unit-scale noise draw for step `k`, uniform in `[−1, 1]` per coordinate.
    ///
    /// Each step has its own stream so that the draw depends only on `(seed, k)`, and runs that
    /// differ only in the degradation factor see proportional noise.
    pub fn unit_noise(&self, k: usize) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k as u64);
        DVector::from_iterator(self.bias_amplitudes.len(), (0..self.bias_amplitudes.len()).map(|_| rng.gen_range(-1.0..=1.0)))
    }

    /// `y = C x + b(x) + η_k`.
    pub fn perceive(&self, c: &DMatrix<f64>, x: &DVector<f64>, k: usize) -> DVector<f64> {
        c * x + self.bias(x) + self.unit_noise(k) * self.noise_bound()
    }
}

/// Free-function form of [`SyntheticPerceptionModel::perceive`].
pub fn perceive(model: &SyntheticPerceptionModel, c: &DMatrix<f64>, x: &DVector<f64>, k: usize) -> DVector<f64> {
    model.perceive(c, x, k)
}

/// Source of the perception error during a simulation.
#[derive(Debug, Clone, PartialEq)]
pub enum Perception {
    Synthetic(SyntheticPerceptionModel),
    /// `e_k` given explicitly, zero after the end.
    Errors(Vec<DVector<f64>>),
}

impl Perception {
    fn measure(&self, c: &DMatrix<f64>, x: &DVector<f64>, k: usize) -> DVector<f64> {
        match self {
            Perception::Synthetic(model) => model.perceive(c, x, k),
            Perception::Errors(list) => match list.get(k) {
                Some(e) => c * x + e,
                None => c * x,
            },
        }
    }
}

/// Process disturbance during a simulation.
#[derive(Debug, Clone, PartialEq)]
pub enum Disturbance {
    /// `w_k` uniform in `[−bound, bound]` per coordinate, entering through `H`.
    Uniform { bound: f64, seed: u64 },
    /// Perturbations added to the state directly, zero after the end.
    State(Vec<DVector<f64>>),
}

/// Hover-linearised PD law on tracking errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdController {
    pub kp: [f64; 3],
    pub kd: [f64; 3],
    pub params: QuadrotorParams,
}

impl PdController {
    pub fn new(kp: [f64; 3], kd: [f64; 3], params: QuadrotorParams) -> Result<Self> {
        if kp.iter().chain(&kd).any(|g| !g.is_finite()) {
            return Err(invalid("pd gains", "must be finite"));
        }
        params.validate()?;
        Ok(Self { kp, kd, params })
    }

    /// Absolute command `(pitch, roll, thrust)` for a tracking measurement `(p − p_ref, v − v_ref)`.
    pub fn command(&self, tracking: &DVector<f64>) -> DVector<f64> {
        let a: Vec<f64> = (0..3)
            .map(|i| -self.kp[i] * tracking[i] - self.kd[i] * tracking[3 + i])
            .collect();
        DVector::from_vec(vec![
            -a[0] / self.params.g,
            a[1] / self.params.g,
            self.params.mass * (self.params.g + a[2]),
        ])
    }

    /// Command relative to hover trim.
    pub fn correction(&self, tracking: &DVector<f64>) -> DVector<f64> {
        self.command(tracking) - self.params.trim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Controller {
    Fir {
        controller: FirController,
        /// Replaces the thrust channel with this PD law.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        z_axis_pd: Option<PdController>,
    },
    Pd {
        pd: PdController,
    },
}

impl Controller {
    pub fn fir(controller: FirController) -> Self {
        Controller::Fir {
            controller,
            z_axis_pd: None,
        }
    }
}

/// Per-run controller memory.
struct ControllerState<'a> {
    ctrl: &'a Controller,
    history: Option<MeasurementHistory>,
}

impl<'a> ControllerState<'a> {
    fn new(ctrl: &'a Controller) -> Self {
        let history = match ctrl {
            Controller::Fir { controller, .. } => Some(MeasurementHistory::new(controller.outputs(), controller.horizon())),
            Controller::Pd { .. } => None,
        };
        Self { ctrl, history }
    }

    /// Input correction for step `k` given the tracking measurement at `k`. The FIR part only
    /// sees measurements up to `k − 1`.
    fn correction(&mut self, tracking: &DVector<f64>) -> Result<DVector<f64>> {
        match self.ctrl {
            Controller::Pd { pd } => Ok(pd.correction(tracking)),
            Controller::Fir { controller, z_axis_pd } => {
                let history = self.history.as_mut().expect("fir history");
                let mut du = controller.output(history)?;
                history.push(tracking.clone())?;
                if let Some(pd) = z_axis_pd {
                    du[2] = pd.correction(tracking)[2];
                }
                Ok(du)
            }
        }
    }
}

/// Per-step record of one closed-loop run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimLog {
    pub times: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub x_ref: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub e: Vec<DVector<f64>>,
    pub e_norm: Vec<f64>,
}

impl SimLog {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn header(n: usize, p: usize, m: usize) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend((0..n).map(|i| format!("x{i}")));
        h.extend((0..n).map(|i| format!("xr{i}")));
        h.extend((0..p).map(|i| format!("y{i}")));
        h.extend((0..m).map(|i| format!("u{i}")));
        h.extend((0..p).map(|i| format!("e{i}")));
        h.push("enorm".into());
        h
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let (n, p, m) = match (self.x.first(), self.y.first(), self.u.first()) {
            (Some(x), Some(y), Some(u)) => (x.len(), y.len(), u.len()),
            _ => (0, 0, 0),
        };
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(Self::header(n, p, m))?;
        for k in 0..self.len() {
            let mut row = vec![self.times[k].to_string()];
            for v in [&self.x[k], &self.x_ref[k], &self.y[k], &self.u[k], &self.e[k]] {
                row.extend(v.iter().map(f64::to_string));
            }
            row.push(self.e_norm[k].to_string());
            w.write_record(row)?;
        }
        w.flush().map_err(|source| Error::Io {
            path: "<simulation log>".into(),
            source,
        })?;
        Ok(())
    }

    /// Reads a log written by [`SimLog::write_csv`] for a plant with `n` states, `p` outputs and `m` inputs.
    pub fn read_csv<R: Read>(reader: R, n: usize, p: usize, m: usize, source: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let expected = Self::header(n, p, m);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != expected {
            return Err(Error::Parse {
                path: source.into(),
                line: 1,
                reason: format!("expected header {}", expected.join(",")),
            });
        }
        let mut log = SimLog::default();
        for (idx, record) in r.records().enumerate() {
            let line = idx + 2;
            let record = record?;
            let values: Vec<f64> = record
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: source.into(),
                    line,
                    reason: e.to_string(),
                })?;
            if values.len() != expected.len() {
                return Err(Error::Parse {
                    path: source.into(),
                    line,
                    reason: format!("expected {} fields, found {}", expected.len(), values.len()),
                });
            }
            let mut at = 1;
            let mut take = |len: usize| {
                let v = DVector::from_column_slice(&values[at..at + len]);
                at += len;
                v
            };
            log.x.push(take(n));
            log.x_ref.push(take(n));
            log.y.push(take(p));
            log.u.push(take(m));
            log.e.push(take(p));
            log.times.push(values[0]);
            log.e_norm.push(values[expected.len() - 1]);
        }
        Ok(log)
    }
}

/// Closed-loop run around a reference.
///
/// Per step: measure, form the tracking measurement `y − C x_ref`, add the controller's
/// correction to the feedforward, and propagate the plant with the deviation from trim.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    sys: &DiscreteLtiSystem,
    params: &QuadrotorParams,
    controller: &Controller,
    reference: &CircleReference,
    perception: &Perception,
    disturbance: &Disturbance,
    steps: usize,
) -> Result<SimLog> {
    sys.validate()?;
    reference.validate()?;
    let (n, m, p, d) = (sys.states(), sys.inputs(), sys.outputs(), sys.disturbances());
    if n != 6 || m != 3 {
        return Err(mismatch("quadrotor plant (states, inputs)", "(6, 3)", format!("({n}, {m})")));
    }
    if let Perception::Synthetic(model) = perception {
        model.validate(p, n)?;
    }
    match controller {
        Controller::Fir { controller, .. } => {
            if controller.inputs() != m || controller.outputs() != p {
                return Err(mismatch(
                    "controller (inputs, outputs)",
                    format!("({m}, {p})"),
                    format!("({}, {})", controller.inputs(), controller.outputs()),
                ));
            }
        }
        Controller::Pd { .. } if p < 6 => {
            return Err(mismatch("pd measurement", 6, p));
        }
        _ => {}
    }
    let trim = params.trim();
    let mut state = ControllerState::new(controller);
    let mut rng = match disturbance {
        Disturbance::Uniform { bound, seed } => {
            if !(*bound >= 0.0 && bound.is_finite()) {
                return Err(invalid("eps_w", "must be finite and non-negative"));
            }
            Some(ChaCha8Rng::seed_from_u64(*seed))
        }
        Disturbance::State(_) => None,
    };

    let mut log = SimLog::default();
    let mut x = reference.state(0);
    for k in 0..steps {
        let (x_ref, u_ff) = reference_signal(reference, params, k);
        let y = perception.measure(&sys.c, &x, k);
        let tracking = &y - &sys.c * &x_ref;
        let u = u_ff + state.correction(&tracking)?;
        let e = &y - &sys.c * &x;
        log.times.push(k as f64 * sys.dt);
        log.e_norm.push(inf_norm(&e));
        log.e.push(e);
        log.y.push(y);
        log.u.push(u.clone());
        log.x_ref.push(x_ref);

        let w = match (&mut rng, disturbance) {
            (Some(rng), Disturbance::Uniform { bound, .. }) => {
                DVector::from_iterator(d, (0..d).map(|_| rng.gen_range(-1.0..=1.0) * bound))
            }
            _ => DVector::zeros(d),
        };
        let mut next = sys.step(&x, &(u - &trim), &w)?;
        if let Disturbance::State(list) = disturbance {
            if let Some(dx) = list.get(k) {
                next += dx;
            }
        }
        log.x.push(std::mem::replace(&mut x, next));
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState {
                step: k + 1,
                log: Box::new(log),
            });
        }
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpulseChannel {
    /// Unit perturbation of one state coordinate at step 0.
    State,
    /// Unit perception error on one measurement coordinate at step 0.
    Measurement,
}

/// Tracking-error states and input corrections after a unit impulse, at hover.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponse {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

/// Runs [`simulate`] at hover with a single unit impulse and returns deviations from the reference.
pub fn impulse_response(
    sys: &DiscreteLtiSystem,
    params: &QuadrotorParams,
    controller: &Controller,
    channel: ImpulseChannel,
    index: usize,
    steps: usize,
) -> Result<ImpulseResponse> {
    let (n, p) = (sys.states(), sys.outputs());
    let reference = CircleReference {
        radius: 0.0,
        dt: sys.dt,
        ..CircleReference::default()
    };
    let unit = |dim: usize| {
        if index >= dim {
            return Err(invalid("impulse index", format!("{index} out of range for dimension {dim}")));
        }
        let mut v = DVector::zeros(dim);
        v[index] = 1.0;
        Ok(v)
    };
    let (perception, disturbance) = match channel {
        ImpulseChannel::State => (Perception::Errors(Vec::new()), Disturbance::State(vec![unit(n)?])),
        ImpulseChannel::Measurement => (Perception::Errors(vec![unit(p)?]), Disturbance::State(Vec::new())),
    };
    let log = simulate(sys, params, controller, &reference, &perception, &disturbance, steps + 1)?;
    let u_ff = reference_signal(&reference, params, 0).1;
    Ok(ImpulseResponse {
        states: log.x.iter().zip(&log.x_ref).map(|(x, r)| x - r).collect(),
        inputs: log.u.iter().map(|u| u - &u_ff).collect(),
    })
}

/// Closed-loop responses of an arbitrary controller, read off impulse simulations and truncated
/// after `horizon` taps.
pub fn responses_from_impulses(
    sys: &DiscreteLtiSystem,
    params: &QuadrotorParams,
    controller: &Controller,
    horizon: usize,
) -> Result<SystemResponses> {
    let (n, m, p) = (sys.states(), sys.inputs(), sys.outputs());
    let collect = |channel: ImpulseChannel, cols: usize| -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
        let mut xs = vec![DMatrix::zeros(n, cols); horizon];
        let mut us = vec![DMatrix::zeros(m, cols); horizon];
        for j in 0..cols {
            let r = impulse_response(sys, params, controller, channel, j, horizon)?;
            for t in 1..=horizon {
                xs[t - 1].set_column(j, &r.states[t]);
                us[t - 1].set_column(j, &r.inputs[t]);
            }
        }
        Ok((xs, us))
    };
    let (xw, uw) = collect(ImpulseChannel::State, n)?;
    let (xe, ue) = collect(ImpulseChannel::Measurement, p)?;
    Ok(SystemResponses {
        phi_xw: FirOperator::new(xw)?,
        phi_xe: FirOperator::new(xe)?,
        phi_uw: FirOperator::new(uw)?,
        phi_ue: FirOperator::new(ue)?,
        horizon,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    /// Root mean square of the position tracking error norm.
    pub tracking_rmse: f64,
    pub max_error: f64,
    pub mean_error: f64,
    pub gamma: Option<f64>,
    /// `max_error ≤ γ`; false when no bound is defined.
    pub bound_satisfied: bool,
}

pub fn metrics(log: &SimLog, report: Option<&GuaranteeReport>) -> Result<MetricsSummary> {
    metrics_with_gamma(log, report.and_then(|r| r.gamma))
}

pub fn metrics_with_gamma(log: &SimLog, gamma: Option<f64>) -> Result<MetricsSummary> {
    if log.is_empty() {
        return Err(Error::Empty("simulation log"));
    }
    let len = log.len() as f64;
    let sq: f64 = log
        .x
        .iter()
        .zip(&log.x_ref)
        .map(|(x, r)| (0..3).map(|i| (x[i] - r[i]).powi(2)).sum::<f64>())
        .sum();
    let max_error = log.e_norm.iter().copied().fold(0.0, f64::max);
    Ok(MetricsSummary {
        tracking_rmse: (sq / len).sqrt(),
        max_error,
        mean_error: log.e_norm.iter().sum::<f64>() / len,
        gamma,
        bound_satisfied: gamma.is_some_and(|g| max_error <= g),
    })
}

/// Causal moving average over `⌈time_constant / dt⌉` samples; the first samples average what
/// is available.
pub fn smooth(series: &[f64], dt: f64, time_constant: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) || !(time_constant >= dt) {
        return Err(invalid("time_constant", format!("must be at least dt = {dt}, got {time_constant}")));
    }
    let window = ((time_constant / dt) - 1e-9).ceil() as usize;
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for (k, &v) in series.iter().enumerate() {
        sum += v;
        if k >= window {
            sum -= series[k - window];
        }
        // Recompute periodically so the running sum does not drift.
        if k % 4096 == 4095 {
            sum = series[(k + 1).saturating_sub(window)..=k].iter().sum();
        }
        out.push(sum / (k + 1).min(window) as f64);
    }
    Ok(out)
}
