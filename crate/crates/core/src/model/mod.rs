//! Exactly linearizable (EL) models:
//!
//! ```text
//! u = Ψ⁻¹(v, y, d)      element-wise bijective input map
//! x = Φ(y, d)           bijective state map
//! ẋ = A(d) x + B(d) u + c(d)
//! z = Ξ(x, u, d)        convex in (x, u)
//! ```
//!
//! All learned maps work on standardized physical signals; the scalers are
//! fitted once from training data and frozen into the model file.

mod dataset;
mod io;
mod train;

pub use dataset::{finite_difference, DatasetMeta, TrajectoryDataset, DATASET_FORMAT};
pub use io::{read_model, write_model, MODEL_FORMAT_VERSION};
pub use train::{split_blocks, train, EpochStats, TrainConfig, TrainError, TrainOutcome};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{AdError, Graph, NodeId, SmallLu, Tensor, MAX_CONDITION};
use crate::nets::{Bnn, BnnInit, Bound, DiagonalBnn, MlpInit, NetError, ParamMlp, ParamStore, Picnn};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("state Jacobian dPhi/dy is singular or ill-conditioned (condition {0:e})")]
    SingularJacobian(f64),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("invalid model file: {0}")]
    Format(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<AdError> for ModelError {
    fn from(e: AdError) -> Self {
        ModelError::Net(NetError::Ad(e))
    }
}

/// Signal dimensions: state/output `n`, input `m`, disturbance `l`,
/// constrained output `p`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub l: usize,
    pub p: usize,
}

/// Per-channel affine standardization `s = (x − mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Column means and standard deviations of `data`; channels with a
    /// standard deviation below `1e-8` keep unit scale.
    pub fn fit(data: &Tensor) -> Self {
        let rows = data.rows().max(1) as f64;
        let cols = data.cols();
        let mut mean = vec![0.0; cols];
        for r in 0..data.rows() {
            for (m, v) in mean.iter_mut().zip(data.row_slice(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows);
        let mut var = vec![0.0; cols];
        for r in 0..data.rows() {
            for ((s, v), m) in var.iter_mut().zip(data.row_slice(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|s| {
                let sd = (s / rows).sqrt();
                if sd > 1e-8 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn scale(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn unscale(&self, s: &[f64]) -> Vec<f64> {
        s.iter().zip(&self.mean).zip(&self.std).map(|((v, m), sd)| m + sd * v).collect()
    }

    /// Scales a rate: `ṡ = ẋ / std`.
    pub fn scale_rate(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.std).map(|(v, s)| v / s).collect()
    }

    pub fn unscale_rate(&self, s: &[f64]) -> Vec<f64> {
        s.iter().zip(&self.std).map(|(v, sd)| v * sd).collect()
    }

    pub fn scale_tensor(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        for r in 0..t.rows() {
            for c in 0..t.cols() {
                out.set(r, c, (t.get(r, c) - self.mean[c]) / self.std[c]);
            }
        }
        out
    }

    pub fn scale_rate_tensor(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        for r in 0..t.rows() {
            for c in 0..t.cols() {
                out.set(r, c, t.get(r, c) / self.std[c]);
            }
        }
        out
    }
}

/// Scalers for every physical signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Scalers {
    pub y: Scaler,
    pub v: Scaler,
    pub d: Scaler,
    pub z: Scaler,
}

impl Scalers {
    pub fn identity(dims: Dims) -> Self {
        Self {
            y: Scaler::identity(dims.n),
            v: Scaler::identity(dims.m),
            d: Scaler::identity(dims.l),
            z: Scaler::identity(dims.p),
        }
    }

    pub fn fit(data: &TrajectoryDataset) -> Self {
        Self { y: Scaler::fit(&data.y), v: Scaler::fit(&data.v), d: Scaler::fit(&data.d), z: Scaler::fit(&data.z) }
    }
}

/// Network sizes. Stored in the model file header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub phi_depth: usize,
    pub psi_depth: usize,
    pub xi_depth: usize,
    /// Hidden width of every conditioning network.
    pub hidden: usize,
    /// Hidden width of the convex network.
    pub xi_hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { phi_depth: 3, psi_depth: 3, xi_depth: 3, hidden: 32, xi_hidden: 32 }
    }
}

/// Initialization scales of a fresh model.
#[derive(Clone, Debug)]
pub struct ModelInit {
    /// Output gain of the Φ conditioning networks (0 gives Φ = identity).
    pub phi_gain: f64,
    /// Output gain of the Ψ conditioning networks.
    pub psi_gain: f64,
    /// Output gain of the A, B, c networks.
    pub linear_gain: f64,
    /// Initial `A(d)` diagonal.
    pub a_diag: f64,
    /// Initial `B(d)` diagonal (leading square block).
    pub b_diag: f64,
}

impl Default for ModelInit {
    fn default() -> Self {
        Self { phi_gain: 0.05, psi_gain: 0.05, linear_gain: 0.05, a_diag: -1.0, b_diag: 1.0 }
    }
}

/// Disturbance-conditioned linear core at one `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearCore {
    /// `n × n`.
    pub a: Tensor,
    /// `n × m`.
    pub b: Tensor,
    pub c: Vec<f64>,
}

/// A learned or constructed EL model.
#[derive(Clone, Debug)]
pub struct ELModel {
    pub dims: Dims,
    pub arch: Architecture,
    pub scalers: Scalers,
    pub store: ParamStore,
    pub phi: Bnn,
    pub psi: DiagonalBnn,
    pub xi: Picnn,
    pub a_net: ParamMlp,
    pub b_net: ParamMlp,
    pub c_net: ParamMlp,
}

/// Graph nodes produced by [`ELModel::predict_graph`]. Rates and outputs
/// are in physical units.
pub struct Prediction {
    pub ydot: NodeId,
    pub z: NodeId,
    pub x: NodeId,
    pub u: NodeId,
}

impl ELModel {
    pub fn new(dims: Dims, arch: Architecture, scalers: Scalers, init: &ModelInit, seed: u64) -> Self {
        let Dims { n, m, l, p } = dims;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = arch.hidden;
        let phi = Bnn::new(
            &mut store,
            "phi",
            n,
            l,
            arch.phi_depth,
            &BnnInit { hidden: h, weight_gain: init.phi_gain, shift_gain: init.phi_gain },
            &mut rng,
        );
        let psi = DiagonalBnn::new(
            &mut store,
            "psi",
            m,
            n + l,
            arch.psi_depth,
            &BnnInit { hidden: h, weight_gain: init.psi_gain, shift_gain: init.psi_gain },
            &mut rng,
        );
        let xi = Picnn::new(&mut store, "xi", n + m, l, p, arch.xi_depth, arch.xi_hidden, &mut rng);
        let a_bias: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { init.a_diag } else { 0.0 }).collect();
        let b_bias: Vec<f64> = (0..n * m).map(|k| if k / m == k % m { init.b_diag } else { 0.0 }).collect();
        let a_net =
            ParamMlp::new(&mut store, "A", l, h, n * n, &MlpInit::small(init.linear_gain).with_bias(a_bias), &mut rng);
        let b_net =
            ParamMlp::new(&mut store, "B", l, h, n * m, &MlpInit::small(init.linear_gain).with_bias(b_bias), &mut rng);
        let c_net = ParamMlp::new(&mut store, "c", l, h, n, &MlpInit::small(init.linear_gain), &mut rng);
        Self { dims, arch, scalers, store, phi, psi, xi, a_net, b_net, c_net }
    }

    /// Configures Φ and Ψ as identities (in standardized coordinates) and
    /// the linear core as the constants `a`, `b`, `c`.
    pub fn set_identity_maps(&mut self) {
        let n = self.dims.n;
        let m = self.dims.m;
        for layer in &self.phi.layers {
            layer.w.set_constant(&mut self.store, &vec![0.0; n * n]);
            layer.b.set_constant(&mut self.store, &vec![0.0; n]);
            layer.c.set_constant(&mut self.store, &vec![0.0; n]);
        }
        for layer in &self.psi.layers {
            layer.w.set_constant(&mut self.store, &vec![0.0; m]);
            layer.b.set_constant(&mut self.store, &vec![0.0; m]);
            layer.c.set_constant(&mut self.store, &vec![0.0; m]);
        }
    }

    /// Makes `A(d)`, `B(d)`, `c(d)` the given constants (row-major).
    pub fn set_linear_core(&mut self, a: &[f64], b: &[f64], c: &[f64]) {
        self.a_net.set_constant(&mut self.store, a);
        self.b_net.set_constant(&mut self.store, b);
        self.c_net.set_constant(&mut self.store, c);
    }

    fn check_len(what: &str, v: &[f64], len: usize) -> Result<(), ModelError> {
        if v.len() != len {
            return Err(ModelError::Shape(format!("{what} has length {} (expected {len})", v.len())));
        }
        Ok(())
    }

    // ----- graph building blocks (standardized coordinates, batched) -----

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.store.bind(g, trainable)
    }

    /// `x = Φ(y, d)` from standardized `y_s`, `d_s`.
    pub fn phi_graph(&self, g: &mut Graph, p: &Bound, ys: NodeId, ds: NodeId) -> Result<NodeId, AdError> {
        self.phi.forward(g, p, ys, ds)
    }

    /// `y_s = Φ⁻¹(x, d)`.
    pub fn phi_inv_graph(&self, g: &mut Graph, p: &Bound, x: NodeId, ds: NodeId) -> Result<NodeId, AdError> {
        self.phi.inverse(g, p, x, ds)
    }

    /// `u = Ψ⁻¹(v, y, d)` from standardized `v_s`, `y_s`, `d_s`.
    pub fn psi_inv_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        vs: NodeId,
        ys: NodeId,
        ds: NodeId,
    ) -> Result<NodeId, AdError> {
        let ctx = g.concat_cols(&[ys, ds])?;
        self.psi.inverse(g, p, vs, ctx)
    }

    /// Standardized `v_s = Ψ(u, y, d)`.
    pub fn psi_graph(&self, g: &mut Graph, p: &Bound, u: NodeId, ys: NodeId, ds: NodeId) -> Result<NodeId, AdError> {
        let ctx = g.concat_cols(&[ys, ds])?;
        self.psi.forward(g, p, u, ctx)
    }

    /// Physical `z = Ξ(x, u, d)`.
    pub fn xi_graph(&self, g: &mut Graph, p: &Bound, x: NodeId, u: NodeId, ds: NodeId) -> Result<NodeId, NetError> {
        let s = g.concat_cols(&[x, u])?;
        let zs = self.xi.forward(g, p, s, ds)?;
        let sd = g.constant(Tensor::row(&self.scalers.z.std));
        let mu = g.constant(Tensor::row(&self.scalers.z.mean));
        let z = g.mul(zs, sd)?;
        Ok(g.add(z, mu)?)
    }

    /// `(A, B, c)` nodes: `B × n²`, `B × nm`, `B × n`.
    pub fn linear_graph(&self, g: &mut Graph, p: &Bound, ds: NodeId) -> Result<(NodeId, NodeId, NodeId), AdError> {
        Ok((self.a_net.forward(g, p, ds)?, self.b_net.forward(g, p, ds)?, self.c_net.forward(g, p, ds)?))
    }

    /// Batched prediction of `ẏ` and `z` from physical inputs.
    ///
    /// `ẏ = (∂Φ/∂y)⁻¹ (A x + B u + c − (∂Φ/∂d) ḋ)`, with the Jacobian
    /// applied through one linear solve per row.
    pub fn predict_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        v: &Tensor,
        y: &Tensor,
        d: &Tensor,
        ddot: &Tensor,
    ) -> Result<Prediction, ModelError> {
        let Dims { n, m, .. } = self.dims;
        let s = &self.scalers;
        let ys = g.input("y_s", s.y.scale_tensor(y));
        let vs = g.input("v_s", s.v.scale_tensor(v));
        let ds = g.input("d_s", s.d.scale_tensor(d));
        let dds = g.input("ddot_s", s.d.scale_rate_tensor(ddot));
        let full = self.phi.forward_full(g, p, ys, ds, Some(dds))?;
        let u = self.psi_inv_graph(g, p, vs, ys, ds)?;
        let (a, b, c) = self.linear_graph(g, p, ds)?;
        let ax = g.bmatmul(a, full.out, n, n, 1)?;
        let bu = g.bmatmul(b, u, n, m, 1)?;
        let rhs = g.add(ax, bu)?;
        let rhs = g.add(rhs, c)?;
        let rhs = g.sub(rhs, full.tangent.expect("tangent requested"))?;
        let ydot_s = g.bsolve(full.jacobian, rhs, n).map_err(|e| match e {
            AdError::Singular { condition, .. } => ModelError::SingularJacobian(condition),
            other => other.into(),
        })?;
        let sd = g.constant(Tensor::row(&s.y.std));
        let ydot = g.mul(ydot_s, sd)?;
        let z = self.xi_graph(g, p, full.out, u, ds)?;
        Ok(Prediction { ydot, z, x: full.out, u })
    }

    // ----- numeric single-sample evaluation (physical units) -----

    pub fn x_from_y(&self, y: &[f64], d: &[f64]) -> Result<Vec<f64>, ModelError> {
        Self::check_len("y", y, self.dims.n)?;
        Self::check_len("d", d, self.dims.l)?;
        let ds = self.scalers.d.scale(d);
        Ok(self.phi.at(&self.store, &ds, None).forward(&self.scalers.y.scale(y)))
    }

    pub fn y_from_x(&self, x: &[f64], d: &[f64]) -> Result<Vec<f64>, ModelError> {
        Self::check_len("x", x, self.dims.n)?;
        Self::check_len("d", d, self.dims.l)?;
        let ds = self.scalers.d.scale(d);
        let ys = self.phi.at(&self.store, &ds, None).inverse(x)?;
        Ok(self.scalers.y.unscale(&ys))
    }

    fn psi_ctx(&self, y: &[f64], d: &[f64]) -> Vec<f64> {
        let mut ctx = self.scalers.y.scale(y);
        ctx.extend(self.scalers.d.scale(d));
        ctx
    }

    pub fn u_from_v(&self, v: &[f64], y: &[f64], d: &[f64]) -> Result<Vec<f64>, ModelError> {
        Self::check_len("v", v, self.dims.m)?;
        Self::check_len("y", y, self.dims.n)?;
        Self::check_len("d", d, self.dims.l)?;
        let ctx = self.psi_ctx(y, d);
        Ok(self.psi.eval_inverse(&self.store, &self.scalers.v.scale(v), &ctx)?)
    }

    pub fn v_from_u(&self, u: &[f64], y: &[f64], d: &[f64]) -> Result<Vec<f64>, ModelError> {
        Self::check_len("u", u, self.dims.m)?;
        Self::check_len("y", y, self.dims.n)?;
        Self::check_len("d", d, self.dims.l)?;
        let ctx = self.psi_ctx(y, d);
        let vs = self.psi.eval(&self.store, u, &ctx);
        let v = self.scalers.v.unscale(&vs);
        if v.iter().all(|x| x.is_finite()) {
            Ok(v)
        } else {
            Err(NetError::NonFinite("input map").into())
        }
    }

    /// Physical `z = Ξ(x, u, d)`.
    pub fn xi(&self, x: &[f64], u: &[f64], d: &[f64]) -> Result<Vec<f64>, ModelError> {
        Self::check_len("x", x, self.dims.n)?;
        Self::check_len("u", u, self.dims.m)?;
        let mut s = x.to_vec();
        s.extend_from_slice(u);
        let zs = self.xi.eval(&self.store, &s, &self.scalers.d.scale(d));
        Ok(self.scalers.z.unscale(&zs))
    }

    pub fn linear_at(&self, d: &[f64]) -> Result<LinearCore, ModelError> {
        Self::check_len("d", d, self.dims.l)?;
        let Dims { n, m, .. } = self.dims;
        let ds = self.scalers.d.scale(d);
        Ok(LinearCore {
            a: Tensor::new(n, n, self.a_net.eval(&self.store, &ds)),
            b: Tensor::new(n, m, self.b_net.eval(&self.store, &ds)),
            c: self.c_net.eval(&self.store, &ds),
        })
    }

    /// `ẏ` for one sample; see [`ELModel::predict_graph`].
    pub fn predict_ydot(&self, v: &[f64], y: &[f64], d: &[f64], ddot: &[f64]) -> Result<Vec<f64>, ModelError> {
        Self::check_len("ddot", ddot, self.dims.l)?;
        let u = self.u_from_v(v, y, d)?;
        let ds = self.scalers.d.scale(d);
        let dds = self.scalers.d.scale_rate(ddot);
        let frozen = self.phi.at(&self.store, &ds, Some(&dds));
        let core = self.linear_at(d)?;
        self.ydot_from_parts(&frozen, &core, y, &u)
    }

    /// `ẏ` given a context-frozen Φ (with its `ḋ` tangent) and linear core.
    pub(crate) fn ydot_from_parts(
        &self,
        frozen: &crate::nets::FrozenBnn,
        core: &LinearCore,
        y: &[f64],
        u: &[f64],
    ) -> Result<Vec<f64>, ModelError> {
        let Dims { n, m, .. } = self.dims;
        let eval = frozen.forward_full(&self.scalers.y.scale(y));
        let mut rhs = core.c.clone();
        for i in 0..n {
            for j in 0..n {
                rhs[i] += core.a.get(i, j) * eval.out[j];
            }
            for j in 0..m {
                rhs[i] += core.b.get(i, j) * u[j];
            }
            rhs[i] -= eval.tangent[i];
        }
        let lu = SmallLu::factor(&eval.jacobian, n).ok_or(ModelError::SingularJacobian(f64::INFINITY))?;
        let cond = lu.condition_1(&eval.jacobian);
        if !(cond <= MAX_CONDITION) {
            return Err(ModelError::SingularJacobian(cond));
        }
        let ydot = self.scalers.y.unscale_rate(&lu.solve(&rhs));
        if ydot.iter().all(|v| v.is_finite()) {
            Ok(ydot)
        } else {
            Err(NetError::NonFinite("predicted rate").into())
        }
    }

    /// `ẑ = Ξ(Φ(y, d), Ψ⁻¹(v, y, d), d)`.
    pub fn predict_z(&self, v: &[f64], y: &[f64], d: &[f64]) -> Result<Vec<f64>, ModelError> {
        let x = self.x_from_y(y, d)?;
        let u = self.u_from_v(v, y, d)?;
        self.xi(&x, &u, d)
    }
}
