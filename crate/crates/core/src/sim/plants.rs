use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Plant, SimError};
use crate::model::{Architecture, Dims, ELModel, LinearCore, ModelInit, Scaler, Scalers};
use crate::nets::FrozenBnn;

/// Parameters of the random ground-truth EL model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub n: usize,
    pub m: usize,
    pub l: usize,
    pub p: usize,
    pub hidden: usize,
    pub depth: usize,
    pub seed: u64,
    /// Output gain of the state-map conditioning networks.
    pub phi_gain: f64,
    /// Output gain of the input-map conditioning networks.
    pub psi_gain: f64,
    /// Output gain of the `A`, `B`, `c` networks.
    pub linear_gain: f64,
    /// Physical input box, mapped to roughly `[−2, 2]` in model units.
    pub v_min: f64,
    pub v_max: f64,
    /// Half-width of the declared state operating box `[−r, r]ⁿ`.
    pub y_box: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            n: 3,
            m: 3,
            l: 2,
            p: 2,
            hidden: 16,
            depth: 2,
            seed: 7,
            phi_gain: 0.3,
            psi_gain: 0.3,
            linear_gain: 0.1,
            v_min: 0.0,
            v_max: 100.0,
            y_box: 5.0,
        }
    }
}

impl TeacherConfig {
    pub fn dims(&self) -> Dims {
        Dims { n: self.n, m: self.m, l: self.l, p: self.p }
    }

    /// The randomly initialized model that serves as ground truth.
    pub fn model(&self) -> Result<ELModel, SimError> {
        if self.n == 0 || self.m == 0 || self.hidden == 0 || self.depth == 0 {
            return Err(SimError::Invalid("teacher dimensions must be positive".into()));
        }
        if !(self.v_min < self.v_max) {
            return Err(SimError::Invalid("teacher input box is empty".into()));
        }
        let dims = self.dims();
        let arch = Architecture {
            phi_depth: self.depth,
            psi_depth: self.depth,
            xi_depth: self.depth,
            hidden: self.hidden,
            xi_hidden: self.hidden,
        };
        let mid = 0.5 * (self.v_min + self.v_max);
        let spread = 0.25 * (self.v_max - self.v_min);
        let scalers = Scalers {
            y: Scaler::identity(dims.n),
            v: Scaler { mean: vec![mid; dims.m], std: vec![spread; dims.m] },
            d: Scaler::identity(dims.l),
            z: Scaler::identity(dims.p),
        };
        let init = ModelInit {
            phi_gain: self.phi_gain,
            psi_gain: self.psi_gain,
            linear_gain: self.linear_gain,
            ..ModelInit::default()
        };
        Ok(ELModel::new(dims, arch, scalers, &init, self.seed))
    }
}

struct FrozenContext {
    d: Vec<f64>,
    ddot: Vec<f64>,
    phi: FrozenBnn,
    core: LinearCore,
}

/// An EL model used as a plant. The context-dependent parts of the model
/// are cached for the last `(d, ḋ)` seen, which makes integration under
/// piecewise-constant disturbances cheap.
pub struct ModelPlant {
    model: ELModel,
    lower: Vec<f64>,
    upper: Vec<f64>,
    cache: Mutex<Option<FrozenContext>>,
}

impl ModelPlant {
    pub fn new(model: ELModel, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, SimError> {
        if lower.len() != model.dims.n || upper.len() != model.dims.n {
            return Err(SimError::Invalid("operating box must match the state dimension".into()));
        }
        Ok(Self { model, lower, upper, cache: Mutex::new(None) })
    }

    pub fn teacher(cfg: &TeacherConfig) -> Result<Self, SimError> {
        let model = cfg.model()?;
        Self::new(model, vec![-cfg.y_box; cfg.n], vec![cfg.y_box; cfg.n])
    }

    pub fn model(&self) -> &ELModel {
        &self.model
    }
}

impl Plant for ModelPlant {
    fn dims(&self) -> Dims {
        self.model.dims
    }

    fn derivative(&self, y: &[f64], v: &[f64], d: &[f64], ddot: &[f64]) -> Result<Vec<f64>, SimError> {
        let model = &self.model;
        let mut cache = self.cache.lock().expect("plant cache poisoned");
        let stale = cache.as_ref().is_none_or(|c| c.d != d || c.ddot != ddot);
        if stale {
            let ds = model.scalers.d.scale(d);
            let dds = model.scalers.d.scale_rate(ddot);
            *cache = Some(FrozenContext {
                d: d.to_vec(),
                ddot: ddot.to_vec(),
                phi: model.phi.at(&model.store, &ds, Some(&dds)),
                core: model.linear_at(d)?,
            });
        }
        let ctx = cache.as_ref().expect("filled above");
        let u = model.u_from_v(v, y, d)?;
        Ok(model.ydot_from_parts(&ctx.phi, &ctx.core, y, &u)?)
    }

    fn outputs(&self, y: &[f64], v: &[f64], d: &[f64]) -> Result<Vec<f64>, SimError> {
        Ok(self.model.predict_z(v, y, d)?)
    }

    fn operating_box(&self) -> (Vec<f64>, Vec<f64>) {
        (self.lower.clone(), self.upper.clone())
    }
}

/// Hand-written nonlinear plant with the teacher's signal layout
/// (`n = m = 3`, `l = p = 2`, inputs in `[0, 100]`) that is not an EL model:
/// saturating input channels, bilinear state coupling and a cubic damping
/// term.
#[derive(Clone, Debug, Default)]
pub struct NonlinearPlant;

impl Plant for NonlinearPlant {
    fn dims(&self) -> Dims {
        Dims { n: 3, m: 3, l: 2, p: 2 }
    }

    fn derivative(&self, y: &[f64], v: &[f64], d: &[f64], _ddot: &[f64]) -> Result<Vec<f64>, SimError> {
        let s = |k: usize| ((v[k] - 50.0) / 30.0).tanh();
        let out = vec![
            -y[0] - 0.2 * y[0].powi(3) + 0.4 * y[1] + 1.5 * s(0) + 0.3 * d[0],
            -1.5 * y[1] + 0.5 * y[0] * y[2] / (1.0 + y[2] * y[2]) + 1.2 * s(1) + 0.2 * d[1],
            -0.8 * y[2] + 0.3 * y[0] - 0.2 * y[1] + 1.0 * s(2) * (1.0 + 0.2 * y[0].sin()) - 0.1 * d[0] * d[1],
        ];
        Ok(out)
    }

    fn outputs(&self, y: &[f64], v: &[f64], d: &[f64]) -> Result<Vec<f64>, SimError> {
        Ok(vec![
            y[0] * y[0] + 0.5 * y[1] + 0.01 * v[0] + 0.1 * d[0],
            (1.0 + (y[2] + 0.02 * (v[2] - 50.0)).exp()).ln() + 0.2 * y[1].abs(),
        ])
    }

    fn operating_box(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![-5.0; 3], vec![5.0; 3])
    }
}

type RateFn = dyn Fn(&[f64], &[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync;
type OutputFn = dyn Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync;

/// A plant defined by closures `ẏ(y, v, d, ḋ)` and `z(y, v, d)`.
pub struct FnPlant {
    dims: Dims,
    rate: Box<RateFn>,
    output: Box<OutputFn>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl FnPlant {
    pub fn new<F, G>(dims: Dims, rate: F, output: G, half_width: f64) -> Self
    where
        F: Fn(&[f64], &[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
        G: Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self {
            dims,
            rate: Box::new(rate),
            output: Box::new(output),
            lower: vec![-half_width; dims.n],
            upper: vec![half_width; dims.n],
        }
    }
}

impl Plant for FnPlant {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn derivative(&self, y: &[f64], v: &[f64], d: &[f64], ddot: &[f64]) -> Result<Vec<f64>, SimError> {
        Ok((self.rate)(y, v, d, ddot))
    }

    fn outputs(&self, y: &[f64], v: &[f64], d: &[f64]) -> Result<Vec<f64>, SimError> {
        Ok((self.output)(y, v, d))
    }

    fn operating_box(&self) -> (Vec<f64>, Vec<f64>) {
        (self.lower.clone(), self.upper.clone())
    }
}

/// Named plant selection for configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PlantSpec {
    Teacher(TeacherConfig),
    Nonlinear,
}

impl PlantSpec {
    pub fn build(&self) -> Result<Box<dyn Plant>, SimError> {
        Ok(match self {
            PlantSpec::Teacher(cfg) => Box::new(ModelPlant::teacher(cfg)?),
            PlantSpec::Nonlinear => Box::new(NonlinearPlant),
        })
    }
}
