//! Differentiable reverse pass.
//!
//! [`Graph::grad_graph`] records the adjoint computation as ordinary graph
//! nodes, so the resulting gradients can themselves be differentiated. Lie
//! brackets of order `k` nest this `k` times.

use super::graph::{Binary, Graph, NodeId, Op, Unary};
use super::tensor::Tensor;
use super::AdError;

impl Graph {
    /// Gradient of the scalar `output` with respect to each node in `wrt`,
    /// expressed as new nodes of this graph.
    ///
    /// Nodes in `wrt` that do not influence `output` get a zero constant.
    pub fn grad_graph(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, AdError> {
        if output.0 >= self.nodes.len() {
            return Err(AdError::UnknownNode(output.0));
        }
        let seed = {
            let [r, c] = self.shape(output);
            self.constant(Tensor::filled(r, c, 1.0))
        };
        self.grad_graph_seeded(output, seed, wrt)
    }

    /// Vector-Jacobian product `seedᵀ ∂output/∂wrt` as graph nodes.
    pub fn grad_graph_seeded(&mut self, output: NodeId, seed: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, AdError> {
        if self.shape(seed) != self.shape(output) {
            return Err(AdError::Shape {
                op: "grad_graph",
                node: output.0,
                detail: format!("seed {:?} vs output {:?}", self.shape(seed), self.shape(output)),
            });
        }
        let mut adj: Vec<Option<NodeId>> = vec![None; output.0 + 1];
        adj[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx] else { continue };
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            self.vjp_graph(idx, &op, g, &mut adj)?;
        }
        wrt.iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let [r, c] = self.shape(w);
                    Ok(self.constant(Tensor::zeros(r, c)))
                }
            })
            .collect()
    }

    fn acc_graph(&mut self, adj: &mut [Option<NodeId>], id: NodeId, g: NodeId) -> Result<(), AdError> {
        if !self.nodes[id.0].requires_grad {
            return Ok(());
        }
        adj[id.0] = Some(match adj[id.0] {
            Some(prev) => self.add(prev, g)?,
            None => g,
        });
        Ok(())
    }

    fn reduce_graph(&mut self, g: NodeId, shape: [usize; 2]) -> Result<NodeId, AdError> {
        let gs = self.shape(g);
        if gs == shape {
            return Ok(g);
        }
        match (shape[0] == 1 && gs[0] != 1, shape[1] == 1 && gs[1] != 1) {
            (true, true) => self.sum(g),
            (true, false) => self.sum_rows(g),
            (false, true) => self.sum_cols(g),
            (false, false) => Ok(g),
        }
    }

    fn vjp_graph(&mut self, idx: usize, op: &Op, g: NodeId, adj: &mut [Option<NodeId>]) -> Result<(), AdError> {
        let me = NodeId(idx);
        match *op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let sa = self.shape(a);
                let sb = self.shape(b);
                let need_a = self.requires_grad(a);
                let need_b = self.requires_grad(b);
                if need_a {
                    let ga = match kind {
                        Binary::Add | Binary::Sub => g,
                        Binary::Mul => self.mul(g, b)?,
                        Binary::Div => self.div(g, b)?,
                    };
                    let ga = self.reduce_graph(ga, sa)?;
                    self.acc_graph(adj, a, ga)?;
                }
                if need_b {
                    let gb = match kind {
                        Binary::Add => g,
                        Binary::Sub => self.neg(g)?,
                        Binary::Mul => self.mul(g, a)?,
                        Binary::Div => {
                            // -g * y / b, with y = a / b
                            let t = self.mul(g, me)?;
                            let t = self.div(t, b)?;
                            self.neg(t)?
                        }
                    };
                    let gb = self.reduce_graph(gb, sb)?;
                    self.acc_graph(adj, b, gb)?;
                }
            }
            Op::Unary(kind, a) => {
                let local = match kind {
                    Unary::Sinh => Some(self.cosh(a)?),
                    Unary::Cosh => Some(self.sinh(a)?),
                    Unary::Asinh => {
                        let sq = self.square(a)?;
                        let one = self.scalar(1.0);
                        let s = self.add(sq, one)?;
                        let r = self.sqrt(s)?;
                        let t = self.div(g, r)?;
                        self.acc_graph(adj, a, t)?;
                        None
                    }
                    Unary::Exp => Some(me),
                    Unary::Log => {
                        let t = self.div(g, a)?;
                        self.acc_graph(adj, a, t)?;
                        None
                    }
                    Unary::Softplus => Some(self.sigmoid(a)?),
                    Unary::Sigmoid => {
                        let one = self.scalar(1.0);
                        let c = self.sub(one, me)?;
                        Some(self.mul(me, c)?)
                    }
                    Unary::Relu => Some(self.step(a)?),
                    Unary::Step => None,
                    Unary::Square => Some(self.scale(a, 2.0)?),
                    Unary::Sqrt => {
                        let t = self.div(g, me)?;
                        let t = self.scale(t, 0.5)?;
                        self.acc_graph(adj, a, t)?;
                        None
                    }
                };
                if let Some(local) = local {
                    let t = self.mul(g, local)?;
                    self.acc_graph(adj, a, t)?;
                }
            }
            Op::Neg(a) => {
                let t = self.neg(g)?;
                self.acc_graph(adj, a, t)?;
            }
            Op::Scale(a, s) => {
                let t = self.scale(g, s)?;
                self.acc_graph(adj, a, t)?;
            }
            Op::MatMul(a, b) => {
                if self.requires_grad(a) {
                    let bt = self.transpose(b)?;
                    let t = self.matmul(g, bt)?;
                    self.acc_graph(adj, a, t)?;
                }
                if self.requires_grad(b) {
                    let at = self.transpose(a)?;
                    let t = self.matmul(at, g)?;
                    self.acc_graph(adj, b, t)?;
                }
            }
            Op::Transpose(a) => {
                let t = self.transpose(g)?;
                self.acc_graph(adj, a, t)?;
            }
            Op::Sum(a) | Op::SumRows(a) | Op::SumCols(a) => {
                let [r, c] = self.shape(a);
                let t = self.broadcast(g, r, c)?;
                self.acc_graph(adj, a, t)?;
            }
            Op::Mean(a) => {
                let [r, c] = self.shape(a);
                let t = self.broadcast(g, r, c)?;
                let t = self.scale(t, 1.0 / (r * c) as f64)?;
                self.acc_graph(adj, a, t)?;
            }
            Op::Broadcast(a) => {
                let s = self.shape(a);
                let t = self.reduce_graph(g, s)?;
                self.acc_graph(adj, a, t)?;
            }
            Op::SliceCols { src, start } => {
                let total = self.shape(src)[1];
                let t = self.pad_cols(g, total, start)?;
                self.acc_graph(adj, src, t)?;
            }
            Op::PadCols { src, start } => {
                let len = self.shape(src)[1];
                let t = self.slice_cols(g, start, len)?;
                self.acc_graph(adj, src, t)?;
            }
            Op::ConcatCols(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[1];
                    if self.requires_grad(p) {
                        let t = self.slice_cols(g, offset, len)?;
                        self.acc_graph(adj, p, t)?;
                    }
                    offset += len;
                }
            }
            Op::BMatMul { a, b, n, k, m } => {
                if self.requires_grad(a) {
                    let bt = self.btranspose(b, k, m)?;
                    let t = self.bmatmul(g, bt, n, m, k)?;
                    self.acc_graph(adj, a, t)?;
                }
                if self.requires_grad(b) {
                    let at = self.btranspose(a, n, k)?;
                    let t = self.bmatmul(at, g, k, n, m)?;
                    self.acc_graph(adj, b, t)?;
                }
            }
            Op::BTranspose { a, r, c } => {
                let t = self.btranspose(g, c, r)?;
                self.acc_graph(adj, a, t)?;
            }
            Op::BSolve { a, rhs, n } => {
                let at = self.btranspose(a, n, n)?;
                let g_rhs = self.bsolve(at, g, n)?;
                if self.requires_grad(a) {
                    let outer = self.bmatmul(g_rhs, me, n, 1, n)?;
                    let t = self.neg(outer)?;
                    self.acc_graph(adj, a, t)?;
                }
                self.acc_graph(adj, rhs, g_rhs)?;
            }
        }
        Ok(())
    }
}
