use rand::Rng;

use super::mlp::{MlpInit, ParamMlp};
use super::params::{Bound, ParamStore};
use super::NetError;
use crate::ad::{AdError, Graph, NodeId, SmallLu, Tensor, MAX_CONDITION};

/// Initialization scales of a [`Bnn`].
#[derive(Clone, Debug)]
pub struct BnnInit {
    pub hidden: usize,
    /// Output gain of the weight network; 0 gives `W(d) = I`.
    pub weight_gain: f64,
    /// Output gain of the `b(d)` and `c(d)` networks.
    pub shift_gain: f64,
}

impl Default for BnnInit {
    fn default() -> Self {
        Self { hidden: 32, weight_gain: 0.1, shift_gain: 0.1 }
    }
}

/// One bijective layer `y ↦ asinh(c(d) + sinh(W(d) y + b(d)))`.
///
/// `W(d) = L(d) U(d)` with `L` unit lower triangular and `U` upper
/// triangular with diagonal `exp(raw)`, so `det W > 0` for every `d`.
#[derive(Clone, Debug)]
pub struct BnnLayer {
    pub n: usize,
    pub w: ParamMlp,
    pub b: ParamMlp,
    pub c: ParamMlp,
}

/// Composition of [`BnnLayer`]s sharing one conditioning input.
#[derive(Clone, Debug)]
pub struct Bnn {
    pub n: usize,
    pub ctx: usize,
    pub layers: Vec<BnnLayer>,
}

/// Outputs of [`Bnn::forward_full`].
pub struct BnnEval {
    pub out: NodeId,
    /// `∂out/∂y`, one row-major `n × n` matrix per batch row.
    pub jacobian: NodeId,
    /// `(∂out/∂ctx) · tctx` when a context tangent was supplied.
    pub tangent: Option<NodeId>,
}

struct Structure {
    lower: NodeId,
    upper: NodeId,
    eye: NodeId,
    select: NodeId,
    embed: NodeId,
    spread: NodeId,
}

fn structure(g: &mut Graph, n: usize) -> Structure {
    let mut lower = Tensor::zeros(1, n * n);
    let mut upper = Tensor::zeros(1, n * n);
    let mut eye = Tensor::zeros(1, n * n);
    let mut select = Tensor::zeros(n * n, n);
    let mut spread = Tensor::zeros(n, n * n);
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            match i.cmp(&j) {
                std::cmp::Ordering::Greater => lower.set(0, k, 1.0),
                std::cmp::Ordering::Less => upper.set(0, k, 1.0),
                std::cmp::Ordering::Equal => {
                    eye.set(0, k, 1.0);
                    select.set(k, i, 1.0);
                }
            }
            spread.set(i, k, 1.0);
        }
    }
    let embed_t = select.transpose();
    Structure {
        lower: g.constant(lower),
        upper: g.constant(upper),
        eye: g.constant(eye),
        select: g.constant(select),
        embed: g.constant(embed_t),
        spread: g.constant(spread),
    }
}

impl BnnLayer {
    fn new(store: &mut ParamStore, prefix: &str, n: usize, ctx: usize, init: &BnnInit, rng: &mut impl Rng) -> Self {
        let h = init.hidden;
        Self {
            n,
            w: ParamMlp::new(store, &format!("{prefix}.w"), ctx, h, n * n, &MlpInit::small(init.weight_gain), rng),
            b: ParamMlp::new(store, &format!("{prefix}.b"), ctx, h, n, &MlpInit::small(init.shift_gain), rng),
            c: ParamMlp::new(store, &format!("{prefix}.c"), ctx, h, n, &MlpInit::small(init.shift_gain), rng),
        }
    }

    /// `(W, tW)` from the raw weight-network output and its tangent.
    fn weight(
        &self,
        g: &mut Graph,
        s: &Structure,
        raw: NodeId,
        traw: Option<NodeId>,
    ) -> Result<(NodeId, Option<NodeId>), AdError> {
        let n = self.n;
        let l_off = g.mul(raw, s.lower)?;
        let l = g.add(l_off, s.eye)?;
        let u_off = g.mul(raw, s.upper)?;
        let diag_raw = g.matmul(raw, s.select)?;
        let diag = g.exp(diag_raw)?;
        let u_diag = g.matmul(diag, s.embed)?;
        let u = g.add(u_off, u_diag)?;
        let w = g.bmatmul(l, u, n, n, n)?;
        let tw = match traw {
            None => None,
            Some(t) => {
                let tl = g.mul(t, s.lower)?;
                let tu_off = g.mul(t, s.upper)?;
                let td = g.matmul(t, s.select)?;
                let td = g.mul(td, diag)?;
                let td = g.matmul(td, s.embed)?;
                let tu = g.add(tu_off, td)?;
                let a = g.bmatmul(tl, u, n, n, n)?;
                let b = g.bmatmul(l, tu, n, n, n)?;
                Some(g.add(a, b)?)
            }
        };
        Ok((w, tw))
    }
}

impl Bnn {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        n: usize,
        ctx: usize,
        depth: usize,
        init: &BnnInit,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..depth).map(|i| BnnLayer::new(store, &format!("{prefix}.{i}"), n, ctx, init, rng)).collect();
        Self { n, ctx, layers }
    }

    /// Batched forward map `B × n → B × n` conditioned on `ctx` (`B × ctx`).
    pub fn forward(&self, g: &mut Graph, p: &Bound, y: NodeId, ctx: NodeId) -> Result<NodeId, AdError> {
        let s = structure(g, self.n);
        let n = self.n;
        let mut h = y;
        for layer in &self.layers {
            let raw = layer.w.forward(g, p, ctx)?;
            let (w, _) = layer.weight(g, &s, raw, None)?;
            let b = layer.b.forward(g, p, ctx)?;
            let c = layer.c.forward(g, p, ctx)?;
            let wy = g.bmatmul(w, h, n, n, 1)?;
            let pre = g.add(wy, b)?;
            let sh = g.sinh(pre)?;
            let q = g.add(c, sh)?;
            h = g.asinh(q)?;
        }
        Ok(h)
    }

    /// Forward map plus its Jacobian in `y` and, optionally, its directional
    /// derivative along the context tangent `tctx`.
    pub fn forward_full(
        &self,
        g: &mut Graph,
        p: &Bound,
        y: NodeId,
        ctx: NodeId,
        tctx: Option<NodeId>,
    ) -> Result<BnnEval, AdError> {
        let s = structure(g, self.n);
        let n = self.n;
        let mut h = y;
        let mut jac: Option<NodeId> = None;
        let mut th: Option<NodeId> = None;
        for layer in &self.layers {
            let (raw, traw, b, tb, c, tc) = match tctx {
                Some(t) => {
                    let (raw, traw) = layer.w.forward_tangent(g, p, ctx, t)?;
                    let (b, tb) = layer.b.forward_tangent(g, p, ctx, t)?;
                    let (c, tc) = layer.c.forward_tangent(g, p, ctx, t)?;
                    (raw, Some(traw), b, Some(tb), c, Some(tc))
                }
                None => {
                    let raw = layer.w.forward(g, p, ctx)?;
                    let b = layer.b.forward(g, p, ctx)?;
                    let c = layer.c.forward(g, p, ctx)?;
                    (raw, None, b, None, c, None)
                }
            };
            let (w, tw) = layer.weight(g, &s, raw, traw)?;
            let wy = g.bmatmul(w, h, n, n, 1)?;
            let pre = g.add(wy, b)?;
            let sh = g.sinh(pre)?;
            let q = g.add(c, sh)?;
            let out = g.asinh(q)?;
            let ch = g.cosh(pre)?;
            let co = g.cosh(out)?;
            let factor = g.div(ch, co)?;
            // d out / d y = diag(factor) W
            let rows = g.matmul(factor, s.spread)?;
            let local = g.mul(rows, w)?;
            jac = Some(match jac {
                None => local,
                Some(prev) => g.bmatmul(local, prev, n, n, n)?,
            });
            if let (Some(tw), Some(tb), Some(tc)) = (tw, tb, tc) {
                let mut tpre = g.bmatmul(tw, h, n, n, 1)?;
                tpre = g.add(tpre, tb)?;
                if let Some(th_prev) = th {
                    let wt = g.bmatmul(w, th_prev, n, n, 1)?;
                    tpre = g.add(tpre, wt)?;
                }
                let a = g.mul(ch, tpre)?;
                let a = g.add(a, tc)?;
                th = Some(g.div(a, co)?);
            }
            h = out;
        }
        let jacobian = match jac {
            Some(j) => j,
            None => {
                let rows = g.shape(y)[0];
                let eye = Tensor::new(1, n * n, Tensor::identity(n).into_data());
                let e = g.constant(eye);
                g.broadcast(e, rows, n * n)?
            }
        };
        let tangent = match (tctx, th) {
            (Some(_), Some(t)) => Some(t),
            (Some(_), None) => {
                let [r, c] = g.shape(y);
                Some(g.constant(Tensor::zeros(r, c)))
            }
            _ => None,
        };
        Ok(BnnEval { out: h, jacobian, tangent })
    }

    /// Batched analytic inverse, layer by layer in reverse order:
    /// `y = W⁻¹(asinh(sinh(x) − c) − b)`.
    pub fn inverse(&self, g: &mut Graph, p: &Bound, x: NodeId, ctx: NodeId) -> Result<NodeId, AdError> {
        let s = structure(g, self.n);
        let n = self.n;
        let mut h = x;
        for layer in self.layers.iter().rev() {
            let raw = layer.w.forward(g, p, ctx)?;
            let (w, _) = layer.weight(g, &s, raw, None)?;
            let b = layer.b.forward(g, p, ctx)?;
            let c = layer.c.forward(g, p, ctx)?;
            let sh = g.sinh(h)?;
            let q = g.sub(sh, c)?;
            let a = g.asinh(q)?;
            let t = g.sub(a, b)?;
            h = g.bsolve(w, t, n)?;
        }
        Ok(h)
    }

    /// Evaluates the layer parameters at one context point for fast numeric
    /// use, optionally with their derivatives along `tctx`.
    pub fn at(&self, store: &ParamStore, ctx: &[f64], tctx: Option<&[f64]>) -> FrozenBnn {
        let n = self.n;
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let (raw, traw, b, tb, c, tc) = match tctx {
                    Some(t) => {
                        let (raw, traw) = layer.w.eval_tangent(store, ctx, t);
                        let (b, tb) = layer.b.eval_tangent(store, ctx, t);
                        let (c, tc) = layer.c.eval_tangent(store, ctx, t);
                        (raw, Some(traw), b, Some(tb), c, Some(tc))
                    }
                    None => {
                        (layer.w.eval(store, ctx), None, layer.b.eval(store, ctx), None, layer.c.eval(store, ctx), None)
                    }
                };
                let (w, tw) = weight_numeric(n, &raw, traw.as_deref());
                FrozenLayer { w, b, c, tw, tb, tc }
            })
            .collect();
        FrozenBnn { n, layers }
    }
}

fn weight_numeric(n: usize, raw: &[f64], traw: Option<&[f64]>) -> (Vec<f64>, Option<Vec<f64>>) {
    let mut l = vec![0.0; n * n];
    let mut u = vec![0.0; n * n];
    let mut tl = vec![0.0; n * n];
    let mut tu = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            let t = traw.map_or(0.0, |t| t[k]);
            match i.cmp(&j) {
                std::cmp::Ordering::Greater => {
                    l[k] = raw[k];
                    tl[k] = t;
                }
                std::cmp::Ordering::Less => {
                    u[k] = raw[k];
                    tu[k] = t;
                }
                std::cmp::Ordering::Equal => {
                    l[k] = 1.0;
                    u[k] = raw[k].exp();
                    tu[k] = u[k] * t;
                }
            }
        }
    }
    let w = small_matmul(&l, &u, n);
    let tw = traw.map(|_| {
        let a = small_matmul(&tl, &u, n);
        let b = small_matmul(&l, &tu, n);
        a.iter().zip(&b).map(|(x, y)| x + y).collect()
    });
    (w, tw)
}

fn small_matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let av = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += av * b[k * n + j];
            }
        }
    }
    out
}

fn small_matvec(a: &[f64], x: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum()).collect()
}

struct FrozenLayer {
    w: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    tw: Option<Vec<f64>>,
    tb: Option<Vec<f64>>,
    tc: Option<Vec<f64>>,
}

/// A [`Bnn`] with its conditioning networks evaluated at one context point.
pub struct FrozenBnn {
    n: usize,
    layers: Vec<FrozenLayer>,
}

/// Result of [`FrozenBnn::forward_full`].
pub struct FrozenEval {
    pub out: Vec<f64>,
    /// Row-major `n × n` Jacobian in `y`.
    pub jacobian: Vec<f64>,
    /// Derivative along the context tangent given to [`Bnn::at`], zero if none.
    pub tangent: Vec<f64>,
}

impl FrozenBnn {
    pub fn forward(&self, y: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut h = y.to_vec();
        for l in &self.layers {
            let wy = small_matvec(&l.w, &h, n);
            h = (0..n).map(|i| (l.c[i] + (wy[i] + l.b[i]).sinh()).asinh()).collect();
        }
        h
    }

    pub fn forward_full(&self, y: &[f64]) -> FrozenEval {
        let n = self.n;
        let mut h = y.to_vec();
        let mut jac = Tensor::identity(n).into_data();
        let mut th = vec![0.0; n];
        for l in &self.layers {
            let wy = small_matvec(&l.w, &h, n);
            let pre: Vec<f64> = (0..n).map(|i| wy[i] + l.b[i]).collect();
            let out: Vec<f64> = (0..n).map(|i| (l.c[i] + pre[i].sinh()).asinh()).collect();
            let factor: Vec<f64> = (0..n).map(|i| pre[i].cosh() / out[i].cosh()).collect();
            let mut local = l.w.clone();
            for i in 0..n {
                for j in 0..n {
                    local[i * n + j] *= factor[i];
                }
            }
            jac = small_matmul(&local, &jac, n);
            let mut tpre = small_matvec(&l.w, &th, n);
            if let (Some(tw), Some(tb)) = (&l.tw, &l.tb) {
                let twh = small_matvec(tw, &h, n);
                for i in 0..n {
                    tpre[i] += twh[i] + tb[i];
                }
            }
            let tc = l.tc.as_deref();
            th = (0..n).map(|i| (tc.map_or(0.0, |t| t[i]) + pre[i].cosh() * tpre[i]) / out[i].cosh()).collect();
            h = out;
        }
        FrozenEval { out: h, jacobian: jac, tangent: th }
    }

    pub fn inverse(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        let n = self.n;
        let mut h = x.to_vec();
        for (idx, l) in self.layers.iter().enumerate().rev() {
            let t: Vec<f64> = (0..n).map(|i| (h[i].sinh() - l.c[i]).asinh() - l.b[i]).collect();
            let lu =
                SmallLu::factor(&l.w, n).ok_or(NetError::IllConditioned { layer: idx, condition: f64::INFINITY })?;
            let cond = lu.condition_1(&l.w);
            if !(cond <= MAX_CONDITION) {
                return Err(NetError::IllConditioned { layer: idx, condition: cond });
            }
            h = lu.solve(&t);
        }
        if h.iter().all(|v| v.is_finite()) {
            Ok(h)
        } else {
            Err(NetError::NonFinite("bnn inverse"))
        }
    }

    /// Weight matrix of layer `i` (row-major).
    pub fn weight(&self, i: usize) -> &[f64] {
        &self.layers[i].w
    }
}
