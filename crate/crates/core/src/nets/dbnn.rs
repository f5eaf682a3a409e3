use rand::Rng;

use super::bnn::BnnInit;
use super::mlp::{MlpInit, ParamMlp};
use super::params::{Bound, ParamStore};
use super::NetError;
use crate::ad::{AdError, Graph, NodeId};

/// Element-wise bijective layer `u ↦ asinh(c + sinh(w ⊙ u + b))` with
/// `w = exp(raw) > 0`; all three are functions of the conditioning input.
#[derive(Clone, Debug)]
pub struct DiagonalLayer {
    pub w: ParamMlp,
    pub b: ParamMlp,
    pub c: ParamMlp,
}

/// Composition of [`DiagonalLayer`]s. Strictly increasing in each
/// coordinate of its main input, hence maps coordinate boxes to coordinate
/// boxes.
#[derive(Clone, Debug)]
pub struct DiagonalBnn {
    pub m: usize,
    pub ctx: usize,
    pub layers: Vec<DiagonalLayer>,
}

impl DiagonalBnn {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        m: usize,
        ctx: usize,
        depth: usize,
        init: &BnnInit,
        rng: &mut impl Rng,
    ) -> Self {
        let h = init.hidden;
        let layers = (0..depth)
            .map(|i| {
                let p = format!("{prefix}.{i}");
                DiagonalLayer {
                    w: ParamMlp::new(store, &format!("{p}.w"), ctx, h, m, &MlpInit::small(init.weight_gain), rng),
                    b: ParamMlp::new(store, &format!("{p}.b"), ctx, h, m, &MlpInit::small(init.shift_gain), rng),
                    c: ParamMlp::new(store, &format!("{p}.c"), ctx, h, m, &MlpInit::small(init.shift_gain), rng),
                }
            })
            .collect();
        Self { m, ctx, layers }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, u: NodeId, ctx: NodeId) -> Result<NodeId, AdError> {
        let mut h = u;
        for layer in &self.layers {
            let raw = layer.w.forward(g, p, ctx)?;
            let w = g.exp(raw)?;
            let b = layer.b.forward(g, p, ctx)?;
            let c = layer.c.forward(g, p, ctx)?;
            let s = g.mul(w, h)?;
            let s = g.add(s, b)?;
            let s = g.sinh(s)?;
            let q = g.add(c, s)?;
            h = g.asinh(q)?;
        }
        Ok(h)
    }

    /// `u = (asinh(sinh(x) − c) − b) ⊙ exp(−raw)`, layers in reverse order.
    pub fn inverse(&self, g: &mut Graph, p: &Bound, x: NodeId, ctx: NodeId) -> Result<NodeId, AdError> {
        let mut h = x;
        for layer in self.layers.iter().rev() {
            let raw = layer.w.forward(g, p, ctx)?;
            let neg = g.neg(raw)?;
            let winv = g.exp(neg)?;
            let b = layer.b.forward(g, p, ctx)?;
            let c = layer.c.forward(g, p, ctx)?;
            let s = g.sinh(h)?;
            let q = g.sub(s, c)?;
            let a = g.asinh(q)?;
            let t = g.sub(a, b)?;
            h = g.mul(t, winv)?;
        }
        Ok(h)
    }

    pub fn eval(&self, store: &ParamStore, u: &[f64], ctx: &[f64]) -> Vec<f64> {
        let mut h = u.to_vec();
        for layer in &self.layers {
            let raw = layer.w.eval(store, ctx);
            let b = layer.b.eval(store, ctx);
            let c = layer.c.eval(store, ctx);
            for i in 0..self.m {
                h[i] = (c[i] + (raw[i].exp() * h[i] + b[i]).sinh()).asinh();
            }
        }
        h
    }

    pub fn eval_inverse(&self, store: &ParamStore, x: &[f64], ctx: &[f64]) -> Result<Vec<f64>, NetError> {
        let mut h = x.to_vec();
        for layer in self.layers.iter().rev() {
            let raw = layer.w.eval(store, ctx);
            let b = layer.b.eval(store, ctx);
            let c = layer.c.eval(store, ctx);
            for i in 0..self.m {
                h[i] = ((h[i].sinh() - c[i]).asinh() - b[i]) * (-raw[i]).exp();
            }
        }
        if h.iter().all(|v| v.is_finite()) {
            Ok(h)
        } else {
            Err(NetError::NonFinite("diagonal bnn inverse"))
        }
    }

    /// Element-wise derivative `∂out_i/∂u_i`, strictly positive.
    pub fn eval_derivative(&self, store: &ParamStore, u: &[f64], ctx: &[f64]) -> Vec<f64> {
        let mut h = u.to_vec();
        let mut d = vec![1.0; self.m];
        for layer in &self.layers {
            let raw = layer.w.eval(store, ctx);
            let b = layer.b.eval(store, ctx);
            let c = layer.c.eval(store, ctx);
            for i in 0..self.m {
                let w = raw[i].exp();
                let s = w * h[i] + b[i];
                let out = (c[i] + s.sinh()).asinh();
                d[i] *= w * s.cosh() / out.cosh();
                h[i] = out;
            }
        }
        d
    }
}
