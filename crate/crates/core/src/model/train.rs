use std::ops::Range;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Dims, ELModel, ModelError, TrajectoryDataset};
use crate::ad::{AdError, Graph, NodeId, Tensor};
use crate::nets::{Bound, NetError};

/// Optimizer and data-split settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam step size at the first epoch.
    pub learning_rate: f64,
    /// Step size at the last epoch; decays geometrically in between.
    pub final_learning_rate: f64,
    /// Global gradient-norm clipping threshold.
    pub clip_norm: f64,
    pub seed: u64,
    /// Fraction of contiguous blocks held out for validation.
    pub validation_fraction: f64,
    pub validation_blocks: usize,
    /// Error weight `Q_e` over `[ẏ, z]`; `None` uses the inverse target
    /// variances of the training split.
    pub q_e: Option<Vec<Vec<f64>>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 3e-3,
            final_learning_rate: 1e-4,
            clip_norm: 10.0,
            seed: 0,
            validation_fraction: 0.2,
            validation_blocks: 10,
            q_e: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dims: Dims) -> Result<(), ModelError> {
        let bad = |s: String| Err(ModelError::Config(s));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.final_learning_rate > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) || self.validation_blocks == 0 {
            return bad("validation_fraction must be in [0, 1) with at least one block".into());
        }
        if let Some(q) = &self.q_e {
            check_q(q, dims.n + dims.p)?;
        }
        Ok(())
    }
}

/// Checks that `q` is a symmetric positive definite `k × k` matrix.
pub(crate) fn check_q(q: &[Vec<f64>], k: usize) -> Result<Tensor, ModelError> {
    if q.len() != k || q.iter().any(|r| r.len() != k) {
        return Err(ModelError::Config(format!("q_e must be {k}x{k}")));
    }
    let t = Tensor::from_rows(q);
    for i in 0..k {
        for j in 0..k {
            if (t.get(i, j) - t.get(j, i)).abs() > 1e-12 * t.get(i, j).abs().max(1.0) {
                return Err(ModelError::Config("q_e is not symmetric".into()));
            }
        }
    }
    if DMatrix::from_row_slice(k, k, t.data()).cholesky().is_none() {
        return Err(ModelError::Config("q_e is not positive definite".into()));
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub validation_loss: f64,
}

pub struct TrainOutcome {
    /// Parameters with the lowest validation loss (the last epoch's when
    /// there is no validation split).
    pub model: ELModel,
    pub history: Vec<EpochStats>,
    pub q_e: Tensor,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        /// Last parameters that produced a finite loss.
        checkpoint: Box<ELModel>,
    },
}

/// Splits `len` rows into `blocks` contiguous blocks and holds out
/// `round(fraction · blocks)` of them, spread evenly and always including
/// the last block. Returns the training rows and the validation ranges.
pub fn split_blocks(len: usize, fraction: f64, blocks: usize) -> (Vec<usize>, Vec<Range<usize>>) {
    let blocks = blocks.max(1).min(len.max(1));
    let k = ((fraction * blocks as f64).round() as usize).min(blocks.saturating_sub(1));
    let held: Vec<usize> = (0..k).map(|i| (i + 1) * blocks / k - 1).collect();
    let bounds = |b: usize| (b * len / blocks)..((b + 1) * len / blocks);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for b in 0..blocks {
        if held.contains(&b) {
            val.push(bounds(b));
        } else {
            train.extend(bounds(b));
        }
    }
    (train, val)
}

/// `diag(1/var(ẏ), 1/var(z))` over the given rows.
pub(crate) fn default_q(data: &TrajectoryDataset, rows: &[usize]) -> Tensor {
    let [.., ydot, z] = data.gather(rows);
    let k = ydot.cols() + z.cols();
    let mut q = Tensor::zeros(k, k);
    let mut i = 0;
    for t in [&ydot, &z] {
        let sc = super::Scaler::fit(t);
        for sd in &sc.std {
            q.set(i, i, 1.0 / (sd * sd));
            i += 1;
        }
    }
    q
}

impl ELModel {
    /// Records `(1/N) Σ eᵢᵀ Q eᵢ` with `e = [ŷ̇ − ẏ, ẑ − z]` in physical units.
    pub fn loss_graph(&self, g: &mut Graph, p: &Bound, batch: &[Tensor; 6], q: &Tensor) -> Result<NodeId, ModelError> {
        let [v, d, ddot, y, ydot, z] = batch;
        let rows = v.rows();
        if rows == 0 {
            return Err(ModelError::Dataset("empty batch".into()));
        }
        let pred = self.predict_graph(g, p, v, y, d, ddot)?;
        let ydot_t = g.input("ydot", ydot.clone());
        let z_t = g.input("z", z.clone());
        let ey = g.sub(pred.ydot, ydot_t)?;
        let ez = g.sub(pred.z, z_t)?;
        let e = g.concat_cols(&[ey, ez])?;
        let qn = g.constant(q.clone());
        let eq = g.matmul(e, qn)?;
        let prod = g.mul(e, eq)?;
        let s = g.sum(prod)?;
        Ok(g.scale(s, 1.0 / rows as f64)?)
    }

    /// Loss over `rows` of `data`.
    pub fn loss(&self, data: &TrajectoryDataset, rows: &[usize], q: &Tensor) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for chunk in rows.chunks(1024) {
            let mut g = Graph::new();
            let p = self.bind(&mut g, false);
            let l = self.loss_graph(&mut g, &p, &data.gather(chunk), q)?;
            total += g.value(l).item() * chunk.len() as f64;
        }
        Ok(total / rows.len().max(1) as f64)
    }

    /// Loss and its gradient for every parameter tensor, in store order.
    pub fn loss_and_gradient(&self, batch: &[Tensor; 6], q: &Tensor) -> Result<(f64, Vec<Tensor>), ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, true);
        let l = self.loss_graph(&mut g, &p, batch, q)?;
        let grads = g.backward(l, &Tensor::scalar(1.0))?;
        let out = p.ids().iter().map(|&id| grads.get_or_zero(&g, id)).collect();
        Ok((g.value(l).item(), out))
    }
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &ELModel) -> Self {
        let zeros: Vec<Tensor> = model.store.iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, model: &mut ELModel, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let refs: Vec<_> = model.store.refs().collect();
        for (i, r) in refs.into_iter().enumerate() {
            let param = model.store.get_mut(r);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, (w, g)) in param.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[k] = Self::B1 * m[k] + (1.0 - Self::B1) * g;
                v[k] = Self::B2 * v[k] + (1.0 - Self::B2) * g * g;
                *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

fn is_divergence(e: &ModelError) -> bool {
    matches!(
        e,
        ModelError::Net(NetError::Ad(AdError::NonFinite { .. }))
            | ModelError::Net(NetError::Ad(AdError::Singular { .. }))
            | ModelError::Net(NetError::NonFinite(_))
            | ModelError::SingularJacobian(_)
    )
}

/// Minimizes the weighted prediction error with Adam on shuffled
/// minibatches of the training blocks. Deterministic for a fixed seed.
pub fn train(model: ELModel, data: &TrajectoryDataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate(model.dims)?;
    data.validate()?;
    if data.dims() != model.dims {
        return Err(ModelError::Shape(format!("dataset {:?} vs model {:?}", data.dims(), model.dims)).into());
    }
    let (train_rows, val_ranges) = split_blocks(data.len(), cfg.validation_fraction, cfg.validation_blocks);
    let val_rows: Vec<usize> = val_ranges.iter().flat_map(|r| r.clone()).collect();
    let q = match &cfg.q_e {
        Some(q) => check_q(q, model.dims.n + model.dims.p)?,
        None => default_q(data, &train_rows),
    };
    let mut history = Vec::new();
    if cfg.epochs == 0 || train_rows.is_empty() {
        return Ok(TrainOutcome { model, history, q_e: q });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model);
    let mut model = model;
    let mut best: Option<(f64, ELModel)> = None;
    let mut order = train_rows.clone();
    let ratio = cfg.final_learning_rate / cfg.learning_rate;
    for epoch in 0..cfg.epochs {
        let frac = if cfg.epochs > 1 { epoch as f64 / (cfg.epochs - 1) as f64 } else { 0.0 };
        let lr = cfg.learning_rate * ratio.powf(frac);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.gather(chunk);
            let (loss, mut grads) = match model.loss_and_gradient(&batch, &q) {
                Ok(r) => r,
                Err(e) if is_divergence(&e) => {
                    return Err(TrainError::Diverged { epoch, reason: e.to_string(), checkpoint: Box::new(model) })
                }
                Err(e) => return Err(e.into()),
            };
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    reason: "loss is not finite".into(),
                    checkpoint: Box::new(model),
                });
            }
            let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            if norm > cfg.clip_norm {
                let s = cfg.clip_norm / norm;
                grads.iter_mut().for_each(|g| g.scale_in_place(s));
            }
            let snapshot = model.store.clone();
            adam.step(&mut model, &grads, lr);
            if model.store.iter().any(|(_, t)| !t.is_finite()) {
                model.store = snapshot;
                return Err(TrainError::Diverged {
                    epoch,
                    reason: "parameter update produced non-finite values".into(),
                    checkpoint: Box::new(model),
                });
            }
            sum += loss * chunk.len() as f64;
        }
        let train_loss = sum / order.len() as f64;
        let validation_loss = if val_rows.is_empty() {
            train_loss
        } else {
            match model.loss(data, &val_rows, &q) {
                Ok(l) => l,
                Err(e) if is_divergence(&e) => f64::INFINITY,
                Err(e) => return Err(e.into()),
            }
        };
        history.push(EpochStats { epoch, learning_rate: lr, train_loss, validation_loss });
        if validation_loss.is_finite() && best.as_ref().is_none_or(|(b, _)| validation_loss < *b) {
            best = Some((validation_loss, model.clone()));
        }
    }
    let model = match best {
        Some((_, m)) if !val_rows.is_empty() => m,
        _ => model,
    };
    Ok(TrainOutcome { model, history, q_e: q })
}
