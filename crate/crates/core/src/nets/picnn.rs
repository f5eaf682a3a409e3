use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::params::{Bound, ParamRef, ParamStore};
use super::NetError;
use crate::ad::{softplus, Graph, NodeId, Tensor};

/// Partially input-convex network: convex jointly in the convex input `s`
/// for every fixed context `c`.
///
/// With context activations `u₀ = c`, `u_{k+1} = softplus(u_k Ŵ_k + b̂_k)`,
/// each layer computes
///
/// ```text
/// z_{k+1} = σ_k( (z_k ⊙ softplus(u_k W_zu + b_zu)) · softplus(W_z)
///              + (s ⊙ (u_k W_su + b_su)) · W_s
///              + u_k W_u + b )
/// ```
///
/// with `σ_k = softplus` on hidden layers and the identity on the last.
/// The `z`-path weights are nonnegative and softplus is convex and
/// nondecreasing, which makes the output convex in `s`.
#[derive(Clone, Debug)]
pub struct Picnn {
    pub convex_dim: usize,
    pub ctx_dim: usize,
    pub output: usize,
    layers: Vec<PicnnLayer>,
    ctx_layers: Vec<(ParamRef, ParamRef)>,
}

#[derive(Clone, Debug)]
struct PicnnLayer {
    z: Option<ZPath>,
    s_gate_w: ParamRef,
    s_gate_b: ParamRef,
    s_w: ParamRef,
    u_w: ParamRef,
    bias: ParamRef,
}

#[derive(Clone, Debug)]
struct ZPath {
    gate_w: ParamRef,
    gate_b: ParamRef,
    raw_w: ParamRef,
}

fn normal(rng: &mut impl Rng, rows: usize, cols: usize, mean: f64, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            mean + std * z
        })
        .collect();
    Tensor::new(rows, cols, data)
}

impl Picnn {
    /// `depth` layers, hidden width `hidden` on both paths.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        convex_dim: usize,
        ctx_dim: usize,
        output: usize,
        depth: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(depth >= 1, "picnn needs at least one layer");
        let mut ctx_layers = Vec::new();
        let mut u_dims = vec![ctx_dim];
        for k in 0..depth - 1 {
            let fi = u_dims[k];
            let w =
                store.add(format!("{prefix}.ctx{k}.w"), normal(rng, fi, hidden, 0.0, 1.0 / (fi.max(1) as f64).sqrt()));
            let b = store.add(format!("{prefix}.ctx{k}.b"), Tensor::zeros(1, hidden));
            ctx_layers.push((w, b));
            u_dims.push(hidden);
        }
        let mut layers = Vec::new();
        let mut z_dim = 0;
        for k in 0..depth {
            let out = if k + 1 == depth { output } else { hidden };
            let ud = u_dims[k];
            let ustd = 0.1 / (ud.max(1) as f64).sqrt();
            let p = format!("{prefix}.{k}");
            let z = (k > 0).then(|| ZPath {
                gate_w: store.add(format!("{p}.zgate.w"), normal(rng, ud, z_dim, 0.0, ustd)),
                // softplus(0.5413) ≈ 1
                gate_b: store.add(format!("{p}.zgate.b"), Tensor::filled(1, z_dim, 0.5413)),
                raw_w: store.add(format!("{p}.z.w"), normal(rng, z_dim, out, (1.0 / z_dim as f64).ln(), 0.5)),
            });
            let s_std = 1.0 / (convex_dim.max(1) as f64).sqrt();
            layers.push(PicnnLayer {
                z,
                s_gate_w: store.add(format!("{p}.sgate.w"), normal(rng, ud, convex_dim, 0.0, ustd)),
                s_gate_b: store.add(format!("{p}.sgate.b"), Tensor::filled(1, convex_dim, 1.0)),
                s_w: store.add(format!("{p}.s.w"), normal(rng, convex_dim, out, 0.0, s_std)),
                u_w: store.add(format!("{p}.u.w"), normal(rng, ud, out, 0.0, ustd)),
                bias: store.add(format!("{p}.b"), Tensor::zeros(1, out)),
            });
            z_dim = out;
        }
        Self { convex_dim, ctx_dim, output, layers, ctx_layers }
    }

    /// Weights multiplying the convex input directly, one per layer.
    pub fn convex_input_weights(&self) -> Vec<ParamRef> {
        self.layers.iter().map(|l| l.s_w).collect()
    }

    /// Raw weights of the nonnegative `z` path (stored pre-softplus).
    pub fn z_path_weights(&self) -> Vec<ParamRef> {
        self.layers.iter().filter_map(|l| l.z.as_ref().map(|z| z.raw_w)).collect()
    }

    /// Output bias of the last layer.
    pub fn output_bias(&self) -> ParamRef {
        self.layers.last().expect("nonempty").bias
    }

    /// Context-path weights feeding each layer's output directly.
    pub fn context_output_weights(&self) -> Vec<ParamRef> {
        self.layers.iter().map(|l| l.u_w).collect()
    }

    /// Batched forward: `s` is `B × convex_dim`, `ctx` is `B × ctx_dim`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, s: NodeId, ctx: NodeId) -> Result<NodeId, NetError> {
        let mut u = ctx;
        let mut z: Option<NodeId> = None;
        let depth = self.layers.len();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut acc = g.matmul(u, p.get(layer.u_w))?;
            acc = g.add(acc, p.get(layer.bias))?;
            let gate = g.matmul(u, p.get(layer.s_gate_w))?;
            let gate = g.add(gate, p.get(layer.s_gate_b))?;
            let gated = g.mul(s, gate)?;
            let sw = g.matmul(gated, p.get(layer.s_w))?;
            acc = g.add(acc, sw)?;
            if let (Some(zp), Some(zv)) = (&layer.z, z) {
                let wz = g.softplus(p.get(zp.raw_w))?;
                if g.value(wz).data().iter().any(|v| *v < 0.0) {
                    return Err(NetError::NegativeWeight(format!("picnn layer {k}")));
                }
                let zg = g.matmul(u, p.get(zp.gate_w))?;
                let zg = g.add(zg, p.get(zp.gate_b))?;
                let zg = g.softplus(zg)?;
                let zz = g.mul(zv, zg)?;
                let zw = g.matmul(zz, wz)?;
                acc = g.add(acc, zw)?;
            }
            z = Some(if k + 1 < depth { g.softplus(acc)? } else { acc });
            if k + 1 < depth {
                let (w, b) = self.ctx_layers[k];
                let nu = g.matmul(u, p.get(w))?;
                let nu = g.add(nu, p.get(b))?;
                u = g.softplus(nu)?;
            }
        }
        Ok(z.expect("nonempty"))
    }

    pub fn eval(&self, store: &ParamStore, s: &[f64], ctx: &[f64]) -> Vec<f64> {
        let mut u = ctx.to_vec();
        let mut z: Vec<f64> = Vec::new();
        let depth = self.layers.len();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut acc = affine(store.get(layer.u_w), store.get(layer.bias), &u);
            let gate = affine(store.get(layer.s_gate_w), store.get(layer.s_gate_b), &u);
            let gated: Vec<f64> = s.iter().zip(&gate).map(|(a, b)| a * b).collect();
            add_into(&mut acc, &linear(store.get(layer.s_w), &gated));
            if let Some(zp) = &layer.z {
                let wz = store.get(zp.raw_w).map(softplus);
                let zg = affine(store.get(zp.gate_w), store.get(zp.gate_b), &u);
                let zz: Vec<f64> = z.iter().zip(&zg).map(|(a, b)| a * softplus(*b)).collect();
                add_into(&mut acc, &linear(&wz, &zz));
            }
            z = if k + 1 < depth { acc.iter().map(|v| softplus(*v)).collect() } else { acc };
            if k + 1 < depth {
                let (w, b) = self.ctx_layers[k];
                u = affine(store.get(w), store.get(b), &u).into_iter().map(softplus).collect();
            }
        }
        z
    }
}

fn linear(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (k, &xv) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row_slice(k)) {
            *o += xv * wv;
        }
    }
    out
}

fn affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let mut out = linear(w, x);
    add_into(&mut out, b.data());
    out
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}
