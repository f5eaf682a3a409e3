use serde::{Deserialize, Serialize};

use super::closed_loop::{Scenario, SimulationTrace};
use super::signal::Interpolation;
use super::SimError;
use crate::control::{barrier_values, LqrDesign};
use crate::model::ELModel;

/// Tracking quality over one interval of constant target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub start: f64,
    pub end: f64,
    pub target: Vec<f64>,
    /// `sqrt(mean ‖y − y_d‖²)` over the logged rows in `[start, end)`.
    pub rmse: f64,
    /// Whether the target's steady state satisfies every barrier row
    /// strictly, for each disturbance value met in the interval. `None`
    /// without a barrier.
    pub unconstrained: Option<bool>,
}

/// Intervals `[start, end)` over which the target is constant, clipped to
/// the horizon. Ramps between equal knots count as constant.
pub fn hold_segments(scenario: &Scenario) -> Vec<(f64, f64, Vec<f64>)> {
    let pts = &scenario.targets;
    let mut out = Vec::new();
    for (k, w) in pts.iter().enumerate() {
        let next = pts.get(k + 1).map_or(f64::INFINITY, |n| n.t);
        let held = match scenario.target_interpolation {
            Interpolation::Hold => true,
            Interpolation::Linear => pts.get(k + 1).is_none_or(|n| n.value == w.value),
        };
        let (start, end) = (w.t.max(0.0), next.min(scenario.horizon));
        if held && end > start {
            match out.last_mut() {
                Some((_, e, v)) if *e == start && *v == w.value => *e = end,
                _ => out.push((start, end, w.value.clone())),
            }
        }
    }
    out
}

/// Per-segment tracking errors of `trace`. The constraint check designs the
/// steady state at each distinct disturbance value seen in the segment.
pub fn tracking_segments(
    trace: &SimulationTrace,
    scenario: &Scenario,
    model: &ELModel,
) -> Result<Vec<SegmentSummary>, SimError> {
    let mut out = Vec::new();
    for (start, end, target) in hold_segments(scenario) {
        let rows: Vec<_> = trace.rows.iter().filter(|r| r.t >= start && r.t < end).collect();
        if rows.is_empty() {
            continue;
        }
        let ss: f64 = rows.iter().map(|r| r.y.iter().zip(&r.y_d).map(|(y, d)| (y - d) * (y - d)).sum::<f64>()).sum();
        let unconstrained = match &scenario.barrier {
            None => None,
            Some(spec) => {
                let mut ds: Vec<&Vec<f64>> = rows.iter().map(|r| &r.d).collect();
                ds.dedup();
                let mut ok = true;
                for d in ds {
                    let design = LqrDesign::for_model(model, &target, d, &scenario.weights, scenario.target_tolerance)?;
                    let h = barrier_values(model, spec, design.x_d.as_slice(), design.u_d.as_slice(), d)?;
                    ok &= h.iter().all(|h| *h < 0.0);
                }
                Some(ok)
            }
        };
        out.push(SegmentSummary { start, end, target, rmse: (ss / rows.len() as f64).sqrt(), unconstrained });
    }
    Ok(out)
}
