use std::collections::HashMap;
use std::io::Write;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::open_loop::{integrate_held, SafetyBox};
use super::plants::PlantSpec;
use super::signal::{Interpolation, Signal};
use super::{Plant, SimError};
use crate::control::{
    barrier_values_at, icbf_step, sontag_feedback, BarrierSpec, ControlError, ControllerState, LqrDesign, LqrWeights,
};
use crate::model::{Dims, ELModel};
use crate::qp::QpSolver;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    /// LQR on the linear core, applied without any filter.
    Lqr,
    /// LQR filtered by the integral barrier-function QP.
    Icbf,
    /// Sontag's formula on the LQR Lyapunov function.
    Sontag,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Lqr => "lqr",
            ControllerKind::Icbf => "icbf",
            ControllerKind::Sontag => "sontag",
        }
    }
}

/// A value that takes effect at time `t` and holds until the next one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub t: f64,
    pub value: Vec<f64>,
}

fn schedule(points: &[Waypoint], interpolation: Interpolation, what: &str) -> Result<Signal, SimError> {
    if points.is_empty() {
        return Err(SimError::Invalid(format!("the {what} schedule is empty")));
    }
    let times = points.iter().map(|w| w.t).collect();
    let values = points.iter().map(|w| w.value.clone()).collect();
    match interpolation {
        Interpolation::Hold => Signal::steps(times, values),
        Interpolation::Linear => Signal::ramps(times, values),
    }
    .map_err(|e| SimError::Invalid(format!("{what} schedule: {e}")))
}

fn default_hold() -> Interpolation {
    Interpolation::Hold
}

fn default_period() -> f64 {
    0.001
}

fn default_substeps() -> usize {
    10
}

fn default_target_tolerance() -> f64 {
    1e-6
}

fn default_safety() -> f64 {
    10.0
}

/// Closed-loop experiment: controller, schedules and timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub controller: ControllerKind,
    /// Seconds; the trace has `round(horizon / control_period)` rows.
    pub horizon: f64,
    #[serde(default = "default_period")]
    pub control_period: f64,
    /// RK4 steps per control period.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Initial plant state; defaults to rest at the first target.
    #[serde(default)]
    pub y0: Option<Vec<f64>>,
    /// Initial input for the integral barrier controller; defaults to the
    /// LQR input at the initial state.
    #[serde(default)]
    pub v0: Option<Vec<f64>>,
    /// Output targets `y_d`.
    pub targets: Vec<Waypoint>,
    /// `hold` keeps each target until the next waypoint; `linear` moves
    /// between waypoints at constant rate.
    #[serde(default = "default_hold")]
    pub target_interpolation: Interpolation,
    /// Disturbance profile (piecewise constant).
    pub disturbances: Vec<Waypoint>,
    #[serde(default)]
    pub weights: LqrWeights,
    /// Required by the barrier controller; when present the barrier rows
    /// are logged for every controller.
    #[serde(default)]
    pub barrier: Option<BarrierSpec>,
    #[serde(default = "default_target_tolerance")]
    pub target_tolerance: f64,
    /// Quantization step for the disturbance used in controller design
    /// (0 designs at the exact measured value).
    #[serde(default)]
    pub d_grid: f64,
    /// Standard deviation of additive Gaussian noise on the measured `y`.
    #[serde(default)]
    pub measurement_noise: f64,
    #[serde(default = "default_safety")]
    pub safety_factor: f64,
}

impl Scenario {
    pub fn validate(&self, dims: Dims) -> Result<(), SimError> {
        let bad = |s: String| Err(SimError::Invalid(s));
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon {} must be non-negative", self.horizon));
        }
        if !(self.control_period > 0.0 && self.control_period.is_finite()) || self.substeps == 0 {
            return bad("control period and substeps must be positive".into());
        }
        if self.targets.iter().any(|w| w.value.len() != dims.n) {
            return bad(format!("targets must have {} components", dims.n));
        }
        if self.disturbances.iter().any(|w| w.value.len() != dims.l) {
            return bad(format!("disturbances must have {} components", dims.l));
        }
        if self.y0.as_ref().is_some_and(|y| y.len() != dims.n) || self.v0.as_ref().is_some_and(|v| v.len() != dims.m) {
            return bad("initial state or input has the wrong length".into());
        }
        if !(self.measurement_noise >= 0.0 && self.d_grid >= 0.0 && self.safety_factor >= 1.0) {
            return bad("noise and grid must be non-negative, safety factor at least 1".into());
        }
        match &self.barrier {
            Some(spec) => spec.validate(dims.p, dims.m)?,
            None if self.controller == ControllerKind::Icbf => {
                return bad("the icbf controller needs a `barrier` table".into());
            }
            None => {}
        }
        Ok(())
    }
}

/// A plant together with a closed-loop scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosedLoopConfig {
    pub plant: PlantSpec,
    pub scenario: Scenario,
}

/// Source of [`ClosedLoopConfig::standard`].
pub const STANDARD_SCENARIO_TOML: &str = include_str!("../../scenarios/standard.toml");

impl ClosedLoopConfig {
    /// Constrained tracking on the default teacher plant: targets ramp
    /// between three set points over one second, the middle one outside the
    /// output limits, with a disturbance step at 18 s.
    pub fn standard() -> Self {
        toml::from_str(STANDARD_SCENARIO_TOML).expect("bundled scenario parses")
    }
}

/// Provenance recorded with a trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceMeta {
    pub controller: ControllerKind,
    pub dims: Dims,
    pub barrier_rows: usize,
    pub control_period: f64,
    pub seed: u64,
    pub config_hash: String,
    /// Largest KKT residual over the barrier QPs solved in the run (zero
    /// when no QP was solved).
    pub max_qp_kkt: f64,
}

/// One control tick: the measured state and the input held until the next
/// tick.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    /// `Φ(y, d̄)`.
    pub x: Vec<f64>,
    /// `A x + B u + c` of the controller's model.
    pub xdot: Vec<f64>,
    pub u: Vec<f64>,
    /// Input rate from the barrier QP (zero for the other controllers).
    pub lambda: Vec<f64>,
    pub v: Vec<f64>,
    pub y: Vec<f64>,
    /// Plant outputs under the held input.
    pub z: Vec<f64>,
    /// Barrier rows `h(x, u)`; positive entries are violations.
    pub h: Vec<f64>,
    pub d: Vec<f64>,
    pub y_d: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationTrace {
    pub meta: TraceMeta,
    pub rows: Vec<TraceRow>,
}

impl SimulationTrace {
    pub fn columns(&self) -> Vec<String> {
        let Dims { n, m, l, p } = self.meta.dims;
        let mut cols = vec!["t".to_string()];
        for (prefix, k) in [
            ("x", n),
            ("xdot", n),
            ("u", m),
            ("lambda", m),
            ("v", m),
            ("y", n),
            ("z", p),
            ("h", self.meta.barrier_rows),
            ("d", l),
            ("yd", n),
        ] {
            cols.extend((1..=k).map(|i| format!("{prefix}{i}")));
        }
        cols
    }

    /// Largest barrier value over the whole trace (−∞ without rows).
    pub fn max_h(&self) -> f64 {
        self.rows.iter().flat_map(|r| r.h.iter().copied()).fold(f64::NEG_INFINITY, f64::max)
    }

    /// CSV with a commented header describing the run and the columns.
    pub fn write_csv(&self, mut w: impl Write) -> Result<(), SimError> {
        let m = &self.meta;
        writeln!(w, "# simulation trace, one row per control tick")?;
        writeln!(w, "# controller = {}", m.controller.name())?;
        writeln!(w, "# control_period = {}", m.control_period)?;
        writeln!(w, "# seed = {}", m.seed)?;
        writeln!(w, "# config_hash = {}", m.config_hash)?;
        writeln!(w, "# max_qp_kkt = {:e}", m.max_qp_kkt)?;
        writeln!(
            w,
            "# columns: t, x = model state, xdot = model rate, u = model input, lambda = barrier-QP input rate, \
             v = plant input, y = plant state, z = plant outputs, h = barrier rows (<= 0 is safe; z rows, upper v rows, \
             lower v rows), d = disturbance, yd = target"
        )?;
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(self.columns())?;
        let mut rec: Vec<String> = Vec::new();
        for r in &self.rows {
            rec.clear();
            rec.push(r.t.to_string());
            for part in [&r.x, &r.xdot, &r.u, &r.lambda, &r.v, &r.y, &r.z, &r.h, &r.d, &r.y_d] {
                rec.extend(part.iter().map(|v| v.to_string()));
            }
            csv.write_record(&rec)?;
        }
        csv.flush()?;
        Ok(())
    }
}

fn quantize(d: &[f64], grid: f64) -> Vec<f64> {
    if grid > 0.0 {
        d.iter().map(|v| (v / grid).round() * grid).collect()
    } else {
        d.to_vec()
    }
}

/// LQR designs keyed by the exact bits of `(d̄, y_d)`.
struct DesignCache<'a> {
    model: &'a ELModel,
    weights: &'a LqrWeights,
    tol: f64,
    designs: HashMap<Vec<u64>, LqrDesign>,
}

impl DesignCache<'_> {
    fn get(&mut self, d_bar: &[f64], y_d: &[f64]) -> Result<&LqrDesign, ControlError> {
        let key: Vec<u64> = d_bar.iter().chain(y_d).map(|v| v.to_bits()).collect();
        if !self.designs.contains_key(&key) {
            let design = LqrDesign::for_model(self.model, y_d, d_bar, self.weights, self.tol)?;
            self.designs.insert(key.clone(), design);
        }
        Ok(&self.designs[&key])
    }
}

/// Runs `scenario` with `plant` as the true system and `model` inside the
/// controller. At every tick: measure `y`, freeze `d̄`, form `x = Φ(y, d̄)`,
/// compute the controller's `u`, apply `v = Ψ(u, y, d̄)` and hold it while
/// the plant is integrated over the period.
///
/// On a controller failure or divergence the error carries the trace up to
/// the failing tick.
pub fn simulate_closed_loop(
    plant: &dyn Plant,
    model: &ELModel,
    scenario: &Scenario,
) -> Result<SimulationTrace, SimError> {
    let dims = model.dims;
    if plant.dims() != dims {
        return Err(SimError::Invalid(format!("plant {:?} and model {dims:?} dimensions differ", plant.dims())));
    }
    scenario.validate(dims)?;
    let targets = schedule(&scenario.targets, scenario.target_interpolation, "target")?;
    let dist = schedule(&scenario.disturbances, Interpolation::Hold, "disturbance")?;
    let dt = scenario.control_period;
    let ticks = (scenario.horizon / dt).round() as usize;
    let spec = scenario.barrier.as_ref();
    let mut trace = SimulationTrace {
        meta: TraceMeta {
            controller: scenario.controller,
            dims,
            barrier_rows: spec.map_or(0, BarrierSpec::rows),
            control_period: dt,
            seed: scenario.seed,
            config_hash: String::new(),
            max_qp_kkt: 0.0,
        },
        rows: Vec::with_capacity(ticks),
    };
    if ticks == 0 {
        return Ok(trace);
    }
    let mut cache =
        DesignCache { model, weights: &scenario.weights, tol: scenario.target_tolerance, designs: HashMap::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let noise = if scenario.measurement_noise > 0.0 {
        Some(Normal::new(0.0, scenario.measurement_noise).map_err(|e| SimError::Invalid(e.to_string()))?)
    } else {
        None
    };
    let safety = SafetyBox::new(plant, scenario.safety_factor);
    let mut solver = QpSolver::new();

    let d0 = quantize(&dist.value(0.0), scenario.d_grid);
    let yd0 = targets.value(0.0);
    let (mut y, u0) = {
        let design = cache.get(&d0, &yd0)?;
        match &scenario.y0 {
            None => (model.y_from_x(design.x_d.as_slice(), &d0)?, design.u_d.clone()),
            Some(y0) => {
                let x0 = DVector::from_vec(model.x_from_y(y0, &d0)?);
                let u0 = match &scenario.v0 {
                    Some(v0) => DVector::from_vec(model.u_from_v(v0, y0, &d0)?),
                    None => design.control(&x0),
                };
                (y0.clone(), u0)
            }
        }
    };
    let mut state = ControllerState { u: u0, t: 0.0 };
    let mut max_qp_kkt = 0.0f64;

    for k in 0..ticks {
        let t = k as f64 * dt;
        let step = (|| -> Result<TraceRow, SimError> {
            let mut y_meas = y.clone();
            if let Some(nd) = &noise {
                y_meas.iter_mut().for_each(|v| *v += nd.sample(&mut rng));
            }
            let d_now = dist.value(t);
            let d_bar = quantize(&d_now, scenario.d_grid);
            let y_d = targets.value(t);
            let design = cache.get(&d_bar, &y_d)?;
            let x = DVector::from_vec(model.x_from_y(&y_meas, &d_bar)?);
            let (u, lambda, v, h) = match scenario.controller {
                ControllerKind::Lqr | ControllerKind::Sontag => {
                    let u = if scenario.controller == ControllerKind::Lqr {
                        design.control(&x)
                    } else {
                        sontag_feedback(design, &x)
                    };
                    let v = model.v_from_u(u.as_slice(), &y_meas, &d_bar)?;
                    let h = match spec {
                        Some(spec) => barrier_values_at(model, spec, x.as_slice(), &y_meas, u.as_slice(), &d_bar)?,
                        None => Vec::new(),
                    };
                    (u, DVector::zeros(dims.m), v, h)
                }
                ControllerKind::Icbf => {
                    let spec = spec.expect("validated");
                    let u = state.u.clone();
                    let out = icbf_step(model, &state, &y_meas, &d_bar, design, spec, dt, &mut solver)?;
                    max_qp_kkt = max_qp_kkt.max(out.qp.kkt_residual);
                    state = out.state;
                    (u, out.lambda, out.v, out.h)
                }
            };
            let xdot = design.xdot(&x, &u);
            let z = plant.outputs(&y, &v, &d_now)?;
            Ok(TraceRow {
                t,
                x: x.as_slice().to_vec(),
                xdot: xdot.as_slice().to_vec(),
                u: u.as_slice().to_vec(),
                lambda: lambda.as_slice().to_vec(),
                v,
                y: y.clone(),
                z,
                h,
                d: d_now,
                y_d,
            })
        })();
        trace.meta.max_qp_kkt = max_qp_kkt;
        let row = match step {
            Ok(row) => row,
            Err(e) => return Err(interrupted(t, e, trace)),
        };
        match integrate_held(plant, &y, &row.v, &dist, t, dt, scenario.substeps, &safety) {
            Ok(next) => y = next,
            Err(e) => {
                trace.rows.push(row);
                return Err(interrupted(t, e, trace));
            }
        }
        trace.rows.push(row);
    }
    Ok(trace)
}

fn interrupted(t: f64, source: SimError, trace: SimulationTrace) -> SimError {
    SimError::Interrupted { t, source: Box::new(source), trace: Box::new(trace) }
}
