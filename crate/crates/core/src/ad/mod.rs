//! Reverse-mode automatic differentiation over dense 2-D `f64` tensors.

mod graph;
mod higher;
mod tensor;

pub(crate) use graph::SmallLu;
pub use graph::{sigmoid, softplus, Gradients, Graph, NodeId, MAX_CONDITION};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("shape mismatch in {op} at node {node}: {detail}")]
    Shape { op: &'static str, node: usize, detail: String },
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("singular or ill-conditioned system at node {node} (condition {condition:e})")]
    Singular { node: usize, condition: f64 },
    #[error("node {0} has not been evaluated in this graph")]
    UnknownNode(usize),
}

/// Jacobian of `f` at `point`, one reverse pass per output component.
///
/// `f` receives a fresh graph and the `1 × n` variable node holding `point`
/// and must return a `1 × m` output node.
pub fn jacobian<F>(f: F, point: &[f64]) -> Result<Tensor, AdError>
where
    F: FnOnce(&mut Graph, NodeId) -> Result<NodeId, AdError>,
{
    let mut g = Graph::new();
    let x = g.variable("x", Tensor::row(point));
    let out = f(&mut g, x)?;
    let [r, m] = g.shape(out);
    if r != 1 {
        return Err(AdError::Shape {
            op: "jacobian",
            node: out.index(),
            detail: format!("expected a 1 x m output, got {:?}", g.shape(out)),
        });
    }
    let n = point.len();
    let mut jac = Tensor::zeros(m, n);
    for i in 0..m {
        let mut seed = Tensor::zeros(1, m);
        seed.set(0, i, 1.0);
        let grads = g.backward(out, &seed)?;
        if let Some(row) = grads.get(x) {
            for j in 0..n {
                jac.set(i, j, row.get(0, j));
            }
        }
    }
    if !jac.is_finite() {
        return Err(AdError::NonFinite { op: "jacobian", node: out.index() });
    }
    Ok(jac)
}

impl Graph {
    /// Jacobian rows of the `1 × m` node `out` with respect to the `1 × n`
    /// node `wrt`, each row recorded as a differentiable `1 × n` node.
    pub fn jacobian_rows(&mut self, out: NodeId, wrt: NodeId) -> Result<Vec<NodeId>, AdError> {
        let [r, m] = self.shape(out);
        if r != 1 {
            return Err(AdError::Shape {
                op: "jacobian_rows",
                node: out.index(),
                detail: format!("expected a 1 x m output, got {:?}", self.shape(out)),
            });
        }
        let mut rows = Vec::with_capacity(m);
        for i in 0..m {
            let mut e = Tensor::zeros(1, m);
            e.set(0, i, 1.0);
            let seed = self.constant(e);
            rows.push(self.grad_graph_seeded(out, seed, &[wrt])?[0]);
        }
        Ok(rows)
    }
}
