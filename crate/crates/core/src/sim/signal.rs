use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::ad::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SineTerm {
    pub amplitude: f64,
    /// Hz.
    pub frequency: f64,
    pub phase: f64,
}

/// How a sampled signal is read between samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// Zero-order hold; the rate is zero.
    Hold,
    /// Piecewise linear; the rate is the segment slope.
    Linear,
}

/// A vector signal of time with an exact rate.
#[derive(Clone, Debug, PartialEq)]
pub enum Signal {
    Constant(Vec<f64>),
    /// `mid + Σ a sin(2π f t + φ)` per channel.
    Sines {
        mid: Vec<f64>,
        terms: Vec<Vec<SineTerm>>,
    },
    /// `mid + half · sin(φ + 2π (f₀ t + (f₁ − f₀) t² / (2T)))` per channel,
    /// a linear sweep from `f₀` to `f₁` over `[0, T]`.
    Chirp {
        mid: Vec<f64>,
        half: Vec<f64>,
        f0: f64,
        f1: f64,
        duration: f64,
        phase: Vec<f64>,
    },
    /// `values[k]` on `[times[k], times[k + 1])`; `values[0]` before `times[0]`.
    Steps {
        times: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
    /// Linear between `(times[k], values[k])` knots, constant outside them.
    Ramps {
        times: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
    /// Rows of `values` at `t0 + k · period`, clamped at both ends.
    Sampled {
        t0: f64,
        period: f64,
        values: Tensor,
        interpolation: Interpolation,
    },
}

impl Signal {
    pub fn dim(&self) -> usize {
        match self {
            Signal::Constant(c) => c.len(),
            Signal::Sines { mid, .. } | Signal::Chirp { mid, .. } => mid.len(),
            Signal::Steps { values, .. } | Signal::Ramps { values, .. } => values.first().map_or(0, Vec::len),
            Signal::Sampled { values, .. } => values.cols(),
        }
    }

    /// Piecewise-constant schedule; `times` must be non-decreasing.
    pub fn steps(times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self, SimError> {
        Self::check_knots(&times, &values)?;
        Ok(Signal::Steps { times, values })
    }

    /// Piecewise-linear schedule through the knots; repeated times give a
    /// jump.
    pub fn ramps(times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self, SimError> {
        Self::check_knots(&times, &values)?;
        Ok(Signal::Ramps { times, values })
    }

    fn check_knots(times: &[f64], values: &[Vec<f64>]) -> Result<(), SimError> {
        if times.is_empty() || times.len() != values.len() {
            return Err(SimError::Invalid("a schedule needs one value per switching time".into()));
        }
        if times.windows(2).any(|w| !(w[0] <= w[1])) || times.iter().any(|t| !t.is_finite()) {
            return Err(SimError::Invalid("schedule times must be finite and non-decreasing".into()));
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim || v.iter().any(|x| !x.is_finite())) {
            return Err(SimError::Invalid("schedule values must be finite with equal lengths".into()));
        }
        Ok(())
    }

    fn step_index(times: &[f64], t: f64) -> usize {
        times.partition_point(|&s| s <= t).saturating_sub(1)
    }

    pub fn value(&self, t: f64) -> Vec<f64> {
        match self {
            Signal::Constant(c) => c.clone(),
            Signal::Sines { mid, terms } => mid
                .iter()
                .zip(terms)
                .map(|(m, ts)| {
                    m + ts.iter().map(|s| s.amplitude * (2.0 * PI * s.frequency * t + s.phase).sin()).sum::<f64>()
                })
                .collect(),
            Signal::Chirp { mid, half, f0, f1, duration, phase } => {
                let arg = 2.0 * PI * (f0 * t + (f1 - f0) * t * t / (2.0 * duration));
                mid.iter().zip(half).zip(phase).map(|((m, h), p)| m + h * (arg + p).sin()).collect()
            }
            Signal::Steps { times, values } => values[Self::step_index(times, t)].clone(),
            Signal::Ramps { times, values } => {
                let k = Self::step_index(times, t);
                if t < times[0] || k + 1 >= times.len() {
                    return values[k].clone();
                }
                let w = (t - times[k]) / (times[k + 1] - times[k]);
                values[k].iter().zip(&values[k + 1]).map(|(a, b)| a + w * (b - a)).collect()
            }
            Signal::Sampled { t0, period, values, interpolation } => {
                let rows = values.rows();
                let s = ((t - t0) / period).max(0.0);
                let k = (s.floor() as usize).min(rows - 1);
                match interpolation {
                    Interpolation::Hold => values.row_slice(k).to_vec(),
                    Interpolation::Linear => {
                        if k + 1 >= rows {
                            return values.row_slice(rows - 1).to_vec();
                        }
                        let w = s - k as f64;
                        let (a, b) = (values.row_slice(k), values.row_slice(k + 1));
                        a.iter().zip(b).map(|(a, b)| a + w * (b - a)).collect()
                    }
                }
            }
        }
    }

    pub fn rate(&self, t: f64) -> Vec<f64> {
        match self {
            Signal::Constant(c) => vec![0.0; c.len()],
            Signal::Sines { terms, .. } => terms
                .iter()
                .map(|ts| {
                    ts.iter()
                        .map(|s| s.amplitude * 2.0 * PI * s.frequency * (2.0 * PI * s.frequency * t + s.phase).cos())
                        .sum()
                })
                .collect(),
            Signal::Chirp { half, f0, f1, duration, phase, .. } => {
                let arg = 2.0 * PI * (f0 * t + (f1 - f0) * t * t / (2.0 * duration));
                let darg = 2.0 * PI * (f0 + (f1 - f0) * t / duration);
                half.iter().zip(phase).map(|(h, p)| h * darg * (arg + p).cos()).collect()
            }
            Signal::Steps { values, .. } => vec![0.0; values[0].len()],
            Signal::Ramps { times, values } => {
                let k = Self::step_index(times, t);
                if t < times[0] || k + 1 >= times.len() {
                    return vec![0.0; values[0].len()];
                }
                let span = times[k + 1] - times[k];
                values[k].iter().zip(&values[k + 1]).map(|(a, b)| (b - a) / span).collect()
            }
            Signal::Sampled { t0, period, values, interpolation } => {
                let rows = values.rows();
                let cols = values.cols();
                if *interpolation == Interpolation::Hold || rows < 2 || t < *t0 {
                    return vec![0.0; cols];
                }
                let k = ((t - t0) / period).floor() as usize;
                if k + 1 >= rows {
                    return vec![0.0; cols];
                }
                let (a, b) = (values.row_slice(k), values.row_slice(k + 1));
                a.iter().zip(b).map(|(a, b)| (b - a) / period).collect()
            }
        }
    }

    /// Values at `t0 + k · period` for `k < count`, one row each.
    pub fn sample(&self, t0: f64, period: f64, count: usize) -> Tensor {
        let dim = self.dim();
        let mut data = Vec::with_capacity(count * dim);
        for k in 0..count {
            data.extend(self.value(t0 + k as f64 * period));
        }
        Tensor::new(count, dim, data)
    }
}

/// Excitation families for identification experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Excitation {
    /// Linear frequency sweep over the whole duration.
    Chirp {
        f_min: f64,
        f_max: f64,
        /// Fraction of the box half-width, in `[0, 1]`.
        amplitude: f64,
    },
    /// Random switching between the box endpoints on a grid of `hold`
    /// seconds (rounded to whole sample periods).
    Prbs { hold: f64 },
    /// `components` sines per channel with log-uniform random frequencies
    /// in `[f_min, f_max]`, scaled so the sum stays inside the box.
    SumOfSines { f_min: f64, f_max: f64, components: usize, amplitude: f64 },
}

/// Builds an excitation signal inside `[lower, upper]`, deterministic in
/// `seed`.
pub fn gen_excitation(
    exc: &Excitation,
    duration: f64,
    period: f64,
    lower: &[f64],
    upper: &[f64],
    seed: u64,
) -> Result<Signal, SimError> {
    if !(duration > 0.0 && period > 0.0 && duration.is_finite() && period.is_finite()) {
        return Err(SimError::Invalid(format!("duration {duration} and period {period} must be positive")));
    }
    if lower.len() != upper.len()
        || lower.iter().zip(upper).any(|(lo, hi)| !(lo <= hi && lo.is_finite() && hi.is_finite()))
    {
        return Err(SimError::Invalid("excitation box must be finite intervals of equal dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mid: Vec<f64> = lower.iter().zip(upper).map(|(lo, hi)| 0.5 * (lo + hi)).collect();
    let half: Vec<f64> = lower.iter().zip(upper).map(|(lo, hi)| 0.5 * (hi - lo)).collect();
    let band = |f_min: f64, f_max: f64| -> Result<(), SimError> {
        if !(f_min > 0.0 && f_min <= f_max && f_max.is_finite()) {
            return Err(SimError::Invalid(format!("frequency band [{f_min}, {f_max}] is invalid")));
        }
        Ok(())
    };
    let amp = |a: f64| -> Result<f64, SimError> {
        if (0.0..=1.0).contains(&a) {
            Ok(a)
        } else {
            Err(SimError::Invalid(format!("amplitude {a} must lie in [0, 1]")))
        }
    };
    match *exc {
        Excitation::Chirp { f_min, f_max, amplitude } => {
            band(f_min, f_max)?;
            let a = amp(amplitude)?;
            let phase = (0..mid.len()).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            Ok(Signal::Chirp { half: half.iter().map(|h| a * h).collect(), mid, f0: f_min, f1: f_max, duration, phase })
        }
        Excitation::Prbs { hold } => {
            if !(hold > 0.0) {
                return Err(SimError::Invalid(format!("hold {hold} must be positive")));
            }
            let step = (hold / period).round().max(1.0) * period;
            let count = (duration / step).ceil() as usize;
            let mut times = Vec::with_capacity(count);
            let mut values = Vec::with_capacity(count);
            for k in 0..count {
                times.push(k as f64 * step);
                values
                    .push(lower.iter().zip(upper).map(|(&lo, &hi)| if rng.gen_bool(0.5) { hi } else { lo }).collect());
            }
            Signal::steps(times, values)
        }
        Excitation::SumOfSines { f_min, f_max, components, amplitude } => {
            band(f_min, f_max)?;
            let a = amp(amplitude)?;
            if components == 0 {
                return Err(SimError::Invalid("sum-of-sines needs at least one component".into()));
            }
            let (l0, l1) = (f_min.ln(), f_max.ln());
            let terms = half
                .iter()
                .map(|h| {
                    let raw: Vec<(f64, f64, f64)> = (0..components)
                        .map(|_| {
                            let f = if l0 == l1 { f_min } else { rng.gen_range(l0..=l1).exp() };
                            (rng.gen_range(0.5..1.0), f, rng.gen_range(0.0..2.0 * PI))
                        })
                        .collect();
                    let total: f64 = raw.iter().map(|r| r.0).sum();
                    raw.into_iter()
                        .map(|(w, frequency, phase)| SineTerm { amplitude: a * h * w / total, frequency, phase })
                        .collect()
                })
                .collect();
            Ok(Signal::Sines { mid, terms })
        }
    }
}
