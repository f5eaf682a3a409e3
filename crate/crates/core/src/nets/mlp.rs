use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::params::{Bound, ParamRef, ParamStore};
use crate::ad::{sigmoid, softplus, AdError, Graph, NodeId, Tensor};

/// Initialization of a [`ParamMlp`].
#[derive(Clone, Debug)]
pub struct MlpInit {
    /// Multiplier on the default `1/sqrt(fan_in)` standard deviation of the
    /// hidden layers.
    pub hidden_gain: f64,
    /// Same for the output layer. Small values start the network close to
    /// its output bias.
    pub output_gain: f64,
    /// Initial output bias; empty means zeros.
    pub output_bias: Vec<f64>,
}

impl Default for MlpInit {
    fn default() -> Self {
        Self { hidden_gain: 1.0, output_gain: 1.0, output_bias: Vec::new() }
    }
}

impl MlpInit {
    pub fn small(output_gain: f64) -> Self {
        Self { output_gain, ..Self::default() }
    }

    pub fn with_bias(mut self, bias: Vec<f64>) -> Self {
        self.output_bias = bias;
        self
    }
}

/// Three-layer fully connected network `in → hidden → hidden → out` with
/// softplus hidden activations and a linear output.
///
/// The output is a flat row; callers reinterpret it as a matrix where
/// needed (row-major).
#[derive(Clone, Debug)]
pub struct ParamMlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    w: [ParamRef; 3],
    b: [ParamRef; 3],
}

fn normal_tensor(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(rows, cols, data)
}

impl ParamMlp {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        init: &MlpInit,
        rng: &mut impl Rng,
    ) -> Self {
        let dims = [(input, hidden), (hidden, hidden), (hidden, output)];
        let mut w = Vec::with_capacity(3);
        let mut b = Vec::with_capacity(3);
        for (i, &(fi, fo)) in dims.iter().enumerate() {
            let gain = if i == 2 { init.output_gain } else { init.hidden_gain };
            let std = gain / (fi.max(1) as f64).sqrt();
            w.push(store.add(format!("{prefix}.w{i}"), normal_tensor(rng, fi, fo, std)));
            let bias = if i == 2 && !init.output_bias.is_empty() {
                assert_eq!(init.output_bias.len(), output, "output bias length");
                Tensor::row(&init.output_bias)
            } else {
                Tensor::zeros(1, fo)
            };
            b.push(store.add(format!("{prefix}.b{i}"), bias));
        }
        Self { input, hidden, output, w: [w[0], w[1], w[2]], b: [b[0], b[1], b[2]] }
    }

    pub fn weight_refs(&self) -> [ParamRef; 3] {
        self.w
    }

    pub fn bias_refs(&self) -> [ParamRef; 3] {
        self.b
    }

    /// Makes the network output the constant `value` for every input by
    /// zeroing the output weights.
    pub fn set_constant(&self, store: &mut ParamStore, value: &[f64]) {
        assert_eq!(value.len(), self.output, "constant output length");
        store.get_mut(self.w[2]).data_mut().iter_mut().for_each(|v| *v = 0.0);
        *store.get_mut(self.b[2]) = Tensor::row(value);
    }

    /// Batched forward pass: `x` is `B × input`, the result `B × output`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId, AdError> {
        let mut h = x;
        for i in 0..3 {
            let z = g.matmul(h, p.get(self.w[i]))?;
            let z = g.add(z, p.get(self.b[i]))?;
            h = if i < 2 { g.softplus(z)? } else { z };
        }
        Ok(h)
    }

    /// Forward pass together with the directional derivative along the
    /// input tangent `tx` (same shape as `x`).
    pub fn forward_tangent(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: NodeId,
        tx: NodeId,
    ) -> Result<(NodeId, NodeId), AdError> {
        let mut h = x;
        let mut t = tx;
        for i in 0..3 {
            let w = p.get(self.w[i]);
            let z = g.matmul(h, w)?;
            let z = g.add(z, p.get(self.b[i]))?;
            let tz = g.matmul(t, w)?;
            if i < 2 {
                h = g.softplus(z)?;
                let s = g.sigmoid(z)?;
                t = g.mul(s, tz)?;
            } else {
                h = z;
                t = tz;
            }
        }
        Ok((h, t))
    }

    /// Plain numeric evaluation for a single input row.
    pub fn eval(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for i in 0..3 {
            let mut z = affine(store.get(self.w[i]), store.get(self.b[i]), &h);
            if i < 2 {
                z.iter_mut().for_each(|v| *v = softplus(*v));
            }
            h = z;
        }
        h
    }

    /// Numeric evaluation with the directional derivative along `tx`.
    pub fn eval_tangent(&self, store: &ParamStore, x: &[f64], tx: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut h = x.to_vec();
        let mut t = tx.to_vec();
        for i in 0..3 {
            let w = store.get(self.w[i]);
            let mut z = affine(w, store.get(self.b[i]), &h);
            let mut tz = linear(w, &t);
            if i < 2 {
                for (zv, tv) in z.iter_mut().zip(tz.iter_mut()) {
                    *tv *= sigmoid(*zv);
                    *zv = softplus(*zv);
                }
            }
            h = z;
            t = tz;
        }
        (h, t)
    }
}

/// `x W` for a row `x`.
fn linear(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = w.cols();
    let mut out = vec![0.0; cols];
    for (k, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(w.row_slice(k)) {
            *o += xv * wv;
        }
    }
    out
}

/// `x W + b` for a row `x`.
fn affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let mut out = linear(w, x);
    for (o, bv) in out.iter_mut().zip(b.data()) {
        *o += bv;
    }
    out
}
