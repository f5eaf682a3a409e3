use serde::{Deserialize, Serialize};

use super::open_loop::{simulate_open_loop, OpenLoopOptions};
use super::plants::PlantSpec;
use super::signal::{gen_excitation, Excitation};
use super::{Plant, SimError};
use crate::model::TrajectoryDataset;

/// An open-loop identification experiment: plant, excitation and timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: PlantSpec,
    /// Seconds; the dataset has `round(duration / period) + 1` rows, or none
    /// for a zero duration.
    pub duration: f64,
    pub period: f64,
    #[serde(default)]
    pub seed: u64,
    pub input: Excitation,
    pub v_min: Vec<f64>,
    pub v_max: Vec<f64>,
    /// Must be continuous (chirp or sum of sines).
    pub disturbance: Excitation,
    pub d_min: Vec<f64>,
    pub d_max: Vec<f64>,
    /// Initial state; defaults to the origin.
    #[serde(default)]
    pub y0: Option<Vec<f64>>,
    #[serde(default)]
    pub options: OpenLoopOptions,
}

impl Default for ExperimentConfig {
    /// Multisine excitation of the default teacher over its full input box.
    fn default() -> Self {
        Self {
            plant: PlantSpec::Teacher(Default::default()),
            duration: 300.0,
            period: 0.05,
            seed: 1,
            input: Excitation::SumOfSines { f_min: 0.02, f_max: 1.0, components: 8, amplitude: 1.0 },
            v_min: vec![0.0; 3],
            v_max: vec![100.0; 3],
            disturbance: Excitation::SumOfSines { f_min: 0.01, f_max: 0.2, components: 4, amplitude: 1.0 },
            d_min: vec![-1.0; 2],
            d_max: vec![1.0; 2],
            y0: None,
            options: OpenLoopOptions { substeps: 2, ..OpenLoopOptions::default() },
        }
    }
}

impl ExperimentConfig {
    /// Runs the experiment on the configured plant.
    pub fn generate(&self) -> Result<TrajectoryDataset, SimError> {
        let plant = self.plant.build()?;
        self.generate_with(plant.as_ref())
    }

    /// Runs the experiment on `plant`. The input and disturbance signals
    /// draw from independent streams derived from the seed.
    pub fn generate_with(&self, plant: &dyn Plant) -> Result<TrajectoryDataset, SimError> {
        let dims = plant.dims();
        if self.v_min.len() != dims.m
            || self.v_max.len() != dims.m
            || self.d_min.len() != dims.l
            || self.d_max.len() != dims.l
        {
            return Err(SimError::Invalid(format!("input and disturbance boxes must match the plant {dims:?}")));
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return Err(SimError::Invalid(format!("duration {} must be non-negative", self.duration)));
        }
        let y0 = self.y0.clone().unwrap_or_else(|| vec![0.0; dims.n]);
        let steps = (self.duration / self.period).round() as usize;
        if steps == 0 {
            // Validates the request, then drops the initial record.
            let start = simulate_open_loop(
                plant,
                &super::Signal::Constant(self.v_min.clone()),
                &super::Signal::Constant(self.d_min.clone()),
                &y0,
                self.period,
                0,
                &self.options,
            )?;
            return Ok(start.slice(0..0));
        }
        let span = steps as f64 * self.period;
        let v = gen_excitation(&self.input, span, self.period, &self.v_min, &self.v_max, self.seed.wrapping_mul(2))?;
        let d = gen_excitation(
            &self.disturbance,
            span,
            self.period,
            &self.d_min,
            &self.d_max,
            self.seed.wrapping_mul(2).wrapping_add(1),
        )?;
        simulate_open_loop(plant, &v, &d, &y0, self.period, steps, &self.options)
    }
}
