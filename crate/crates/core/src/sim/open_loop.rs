use serde::{Deserialize, Serialize};

use super::signal::{Interpolation, Signal};
use super::{Plant, SimError};
use crate::ad::Tensor;
use crate::model::{DatasetMeta, TrajectoryDataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpenLoopOptions {
    /// RK4 steps per sample period.
    pub substeps: usize,
    /// The run is declared diverged once the state leaves the plant's
    /// operating box enlarged by this factor about its center.
    pub safety_factor: f64,
}

impl Default for OpenLoopOptions {
    fn default() -> Self {
        Self { substeps: 1, safety_factor: 10.0 }
    }
}

/// State bounds beyond which a run counts as diverged.
pub(crate) struct SafetyBox {
    center: Vec<f64>,
    half: Vec<f64>,
}

impl SafetyBox {
    pub(crate) fn new(plant: &dyn Plant, factor: f64) -> Self {
        let (lo, hi) = plant.operating_box();
        Self {
            center: lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect(),
            half: lo.iter().zip(&hi).map(|(a, b)| factor * 0.5 * (b - a)).collect(),
        }
    }

    pub(crate) fn check(&self, t: f64, y: &[f64]) -> Result<(), SimError> {
        let inside = y.iter().zip(&self.center).zip(&self.half).all(|((v, c), h)| v.is_finite() && (v - c).abs() <= *h);
        if inside {
            Ok(())
        } else {
            Err(SimError::Diverged { t, y: y.to_vec() })
        }
    }
}

/// Classical RK4 over `[t0, t0 + span]` in `substeps` equal steps, with `v`
/// held and `d`, `ḋ` read from the signal at each stage time.
#[allow(clippy::too_many_arguments)]
pub(crate) fn integrate_held(
    plant: &dyn Plant,
    y0: &[f64],
    v: &[f64],
    d: &Signal,
    t0: f64,
    span: f64,
    substeps: usize,
    safety: &SafetyBox,
) -> Result<Vec<f64>, SimError> {
    let h = span / substeps as f64;
    let mut y = y0.to_vec();
    let f = |t: f64, y: &[f64]| plant.derivative(y, v, &d.value(t), &d.rate(t));
    let axpy = |y: &[f64], k: &[f64], s: f64| -> Vec<f64> { y.iter().zip(k).map(|(a, b)| a + s * b).collect() };
    for i in 0..substeps {
        let t = t0 + i as f64 * h;
        let k1 = f(t, &y)?;
        let k2 = f(t + 0.5 * h, &axpy(&y, &k1, 0.5 * h))?;
        let k3 = f(t + 0.5 * h, &axpy(&y, &k2, 0.5 * h))?;
        let k4 = f(t + h, &axpy(&y, &k3, h))?;
        for j in 0..y.len() {
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        safety.check(t + h, &y)?;
    }
    Ok(y)
}

fn is_discontinuous(s: &Signal) -> bool {
    match s {
        Signal::Steps { values, .. } => values.windows(2).any(|w| w[0] != w[1]),
        Signal::Ramps { times, values } => {
            (1..times.len()).any(|k| times[k] == times[k - 1] && values[k] != values[k - 1])
        }
        Signal::Sampled { values, interpolation: Interpolation::Hold, .. } => {
            (1..values.rows()).any(|r| values.row_slice(r) != values.row_slice(r - 1))
        }
        _ => false,
    }
}

/// Simulates `steps` sample periods from `y0` with `v` held over each
/// period. Row `k` holds `t_k = k · period` and the signals at that instant;
/// `ẏ` comes from the plant itself and `ḋ` from the disturbance signal, so
/// both derivative columns are exact.
///
/// The derivative tolerance in the metadata allows for the rate jumps that
/// the zero-order hold puts at every sample, which central differences
/// average over.
pub fn simulate_open_loop(
    plant: &dyn Plant,
    v: &Signal,
    d: &Signal,
    y0: &[f64],
    period: f64,
    steps: usize,
    opts: &OpenLoopOptions,
) -> Result<TrajectoryDataset, SimError> {
    let dims = plant.dims();
    if !(period > 0.0 && period.is_finite()) {
        return Err(SimError::Invalid(format!("step {period} must be positive")));
    }
    if opts.substeps == 0 || !(opts.safety_factor >= 1.0) {
        return Err(SimError::Invalid("substeps must be positive and the safety factor at least 1".into()));
    }
    if y0.len() != dims.n || v.dim() != dims.m || d.dim() != dims.l {
        return Err(SimError::Invalid(format!(
            "signal sizes y0 {}, v {}, d {} do not match the plant {dims:?}",
            y0.len(),
            v.dim(),
            d.dim()
        )));
    }
    if is_discontinuous(d) {
        return Err(SimError::Invalid("dataset disturbances must be continuous so that their rate is defined".into()));
    }
    let safety = SafetyBox::new(plant, opts.safety_factor);
    safety.check(0.0, y0)?;
    let rows = steps + 1;
    let mut t = Vec::with_capacity(rows);
    let mut cols: [Vec<f64>; 6] = Default::default();
    let mut y = y0.to_vec();
    let mut prev_v: Option<Vec<f64>> = None;
    let mut jump = vec![0.0f64; dims.n];
    for k in 0..rows {
        let tk = k as f64 * period;
        let vk = v.value(tk);
        let dk = d.value(tk);
        let ddk = d.rate(tk);
        let ydot = plant.derivative(&y, &vk, &dk, &ddk)?;
        if let Some(pv) = &prev_v {
            let before = plant.derivative(&y, pv, &dk, &ddk)?;
            for j in 0..dims.n {
                jump[j] = jump[j].max((ydot[j] - before[j]).abs());
            }
        }
        let z = plant.outputs(&y, &vk, &dk)?;
        t.push(tk);
        for (col, vals) in cols.iter_mut().zip([&vk, &dk, &ddk, &y, &ydot, &z]) {
            col.extend_from_slice(vals);
        }
        if k + 1 < rows {
            y = integrate_held(plant, &y, &vk, d, tk, period, opts.substeps, &safety)?;
        }
        prev_v = Some(vk);
    }
    let [cv, cd, cdd, cy, cydot, cz] = cols;
    let ydot = Tensor::new(rows, dims.n, cydot);
    let allowance = (0..dims.n)
        .map(|c| {
            let scale = (0..rows).fold(1e-12f64, |a, r| a.max(ydot.get(r, c).abs()));
            0.5 * jump[c] / scale
        })
        .fold(0.0, f64::max);
    let mut meta = DatasetMeta::new(dims, period);
    meta.derivative_tolerance = 0.05 + allowance;
    Ok(TrajectoryDataset {
        meta,
        t,
        v: Tensor::new(rows, dims.m, cv),
        d: Tensor::new(rows, dims.l, cd),
        ddot: Tensor::new(rows, dims.l, cdd),
        y: Tensor::new(rows, dims.n, cy),
        ydot,
        z: Tensor::new(rows, dims.p, cz),
    })
}

/// Free-run prediction of a recorded experiment: `plant` is driven from the
/// first recorded state by the recorded inputs (held) and disturbances
/// (linearly interpolated). Returns predicted `y` and `z`, one row per
/// record.
pub fn free_run(plant: &dyn Plant, data: &TrajectoryDataset, substeps: usize) -> Result<(Tensor, Tensor), SimError> {
    if data.is_empty() {
        return Err(SimError::Invalid("cannot replay an empty dataset".into()));
    }
    let period = data.period();
    let v = Signal::Sampled { t0: 0.0, period, values: data.v.clone(), interpolation: Interpolation::Hold };
    let d = Signal::Sampled { t0: 0.0, period, values: data.d.clone(), interpolation: Interpolation::Linear };
    let opts = OpenLoopOptions { substeps, ..OpenLoopOptions::default() };
    let sim = simulate_open_loop(plant, &v, &d, data.y.row_slice(0), period, data.len() - 1, &opts)?;
    Ok((sim.y, sim.z))
}
