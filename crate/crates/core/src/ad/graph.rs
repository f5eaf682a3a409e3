use std::collections::BTreeMap;
use std::sync::Arc;

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use super::AdError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Sinh,
    Cosh,
    Asinh,
    Exp,
    Log,
    Softplus,
    Sigmoid,
    Relu,
    Step,
    Square,
    Sqrt,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Sinh => "sinh",
            Unary::Cosh => "cosh",
            Unary::Asinh => "asinh",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Softplus => "softplus",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::Step => "step",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sinh => x.sinh(),
            Unary::Cosh => x.cosh(),
            Unary::Asinh => x.asinh(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::Step => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
        }
    }

    /// Local derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sinh => x.cosh(),
            Unary::Cosh => x.sinh(),
            Unary::Asinh => 1.0 / (1.0 + x * x).sqrt(),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Step => 0.0,
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
        }
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Binary(Binary, NodeId, NodeId),
    Unary(Unary, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    SumCols(NodeId),
    Broadcast(NodeId),
    SliceCols { src: NodeId, start: usize },
    PadCols { src: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    BMatMul { a: NodeId, b: NodeId, n: usize, k: usize, m: usize },
    BTranspose { a: NodeId, r: usize, c: usize },
    BSolve { a: NodeId, rhs: NodeId, n: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) enum LeafKind {
    Input(String),
    Variable(String),
    Param(String),
    Constant,
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Arc<Tensor>,
    pub(crate) requires_grad: bool,
    pub(crate) leaf: Option<LeafKind>,
}

/// Define-by-run computation graph.
///
/// Every operation evaluates eagerly and records itself, so the graph is
/// always "forward complete"; [`Graph::backward`] walks the recorded nodes
/// in reverse creation order (a valid reverse topological order).
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

/// Condition numbers above this are rejected by batched solves.
pub const MAX_CONDITION: f64 = 1e12;

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    fn push_leaf(&mut self, value: Arc<Tensor>, kind: LeafKind, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad, leaf: Some(kind) });
        id
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<NodeId, AdError> {
        let node = self.next_id();
        if !value.is_finite() {
            return Err(AdError::NonFinite { op: name, node });
        }
        let requires_grad = self.op_inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, value: Arc::new(value), requires_grad, leaf: None });
        Ok(NodeId(node))
    }

    pub(crate) fn op_inputs(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::BMatMul { a, b, .. } => vec![*a, *b],
            Op::BSolve { a, rhs, .. } => vec![*a, *rhs],
            Op::Unary(_, a)
            | Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::Broadcast(a) => vec![*a],
            Op::SliceCols { src, .. } | Op::PadCols { src, .. } => vec![*src],
            Op::BTranspose { a, .. } => vec![*a],
            Op::ConcatCols(v) => v.clone(),
        }
    }

    fn shape_err(&self, op: &'static str, detail: String) -> AdError {
        AdError::Shape { op, node: self.next_id(), detail }
    }

    // ----- leaves -----

    /// Named data input; gradients are not tracked through it.
    pub fn input(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push_leaf(Arc::new(value), LeafKind::Input(name.to_string()), false)
    }

    /// Named input that gradients and Jacobians are taken with respect to.
    pub fn variable(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push_leaf(Arc::new(value), LeafKind::Variable(name.to_string()), true)
    }

    /// Named trainable parameter. The tensor is shared, not copied.
    pub fn param(&mut self, name: &str, value: Arc<Tensor>) -> NodeId {
        self.push_leaf(value, LeafKind::Param(name.to_string()), true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Arc::new(value), LeafKind::Constant, false)
    }

    /// Constant leaf sharing storage with the caller.
    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> NodeId {
        self.push_leaf(value, LeafKind::Constant, false)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// Looks up a named input, variable or parameter leaf.
    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| match &n.leaf {
                Some(LeafKind::Input(s)) | Some(LeafKind::Variable(s)) | Some(LeafKind::Param(s)) => s == name,
                _ => false,
            })
            .map(NodeId)
    }

    pub fn params(&self) -> Vec<(String, NodeId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.leaf {
                Some(LeafKind::Param(s)) => Some((s.clone(), NodeId(i))),
                _ => None,
            })
            .collect()
    }

    // ----- elementwise -----

    fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out_shape = broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| {
            self.shape_err(kind.name(), format!("cannot broadcast {:?} with {:?}", av.shape(), bv.shape()))
        })?;
        let value = broadcast_apply(av, bv, out_shape, |x, y| kind.apply(x, y));
        self.push(Op::Binary(kind, a, b), value, kind.name())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, a: NodeId) -> Result<NodeId, AdError> {
        let value = self.nodes[a.0].value.map(|x| kind.apply(x));
        self.push(Op::Unary(kind, a), value, kind.name())
    }

    pub fn sinh(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.unary(Unary::Sinh, a)
    }
    pub fn cosh(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.unary(Unary::Cosh, a)
    }
    pub fn asinh(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.unary(Unary::Asinh, a)
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.unary(Unary::Log, a)
    }
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.unary(Unary::Softplus, a)
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.unary(Unary::Relu, a)
    }
    /// Heaviside step (derivative of relu); its own derivative is zero.
    pub fn step(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.unary(Unary::Step, a)
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.unary(Unary::Square, a)
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.unary(Unary::Sqrt, a)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let value = self.nodes[a.0].value.map(|x| -x);
        self.push(Op::Neg(a), value, "neg")
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId, AdError> {
        let value = self.nodes[a.0].value.map(|x| x * s);
        self.push(Op::Scale(a, s), value, "scale")
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.cols() != bv.rows() {
            return Err(self.shape_err("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (r, k, c) = (av.rows(), av.cols(), bv.cols());
        let value = Tensor::new(r, c, matmul(av.data(), bv.data(), r, k, c));
        self.push(Op::MatMul(a, b), value, "matmul")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let value = self.nodes[a.0].value.transpose();
        self.push(Op::Transpose(a), value, "transpose")
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let value = Tensor::scalar(self.nodes[a.0].value.sum());
        self.push(Op::Sum(a), value, "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let v = &self.nodes[a.0].value;
        if v.is_empty() {
            return Err(self.shape_err("mean", "mean of empty tensor".into()));
        }
        let value = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(Op::Mean(a), value, "mean")
    }

    /// Column sums: `r × c → 1 × c`.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; v.cols()];
        for r in 0..v.rows() {
            for (o, x) in out.iter_mut().zip(v.row_slice(r)) {
                *o += x;
            }
        }
        let value = Tensor::new(1, v.cols(), out);
        self.push(Op::SumRows(a), value, "sum_rows")
    }

    /// Row sums: `r × c → r × 1`.
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let v = &self.nodes[a.0].value;
        let out = (0..v.rows()).map(|r| v.row_slice(r).iter().sum()).collect();
        let value = Tensor::new(v.rows(), 1, out);
        self.push(Op::SumCols(a), value, "sum_cols")
    }

    /// Expands a `1×1`, `1×c` or `r×1` tensor to `rows × cols`.
    pub fn broadcast(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId, AdError> {
        let v = &self.nodes[a.0].value;
        if broadcast_shape(v.shape(), [rows, cols]) != Some([rows, cols]) {
            return Err(self.shape_err("broadcast", format!("{:?} to {:?}", v.shape(), [rows, cols])));
        }
        let value = broadcast_apply(v, &Tensor::zeros(rows, cols), [rows, cols], |x, _| x);
        self.push(Op::Broadcast(a), value, "broadcast")
    }

    // ----- column structure -----

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, AdError> {
        let v = &self.nodes[a.0].value;
        if start + len > v.cols() {
            return Err(self.shape_err("slice_cols", format!("cols {}..{} of {:?}", start, start + len, v.shape())));
        }
        let mut out = Vec::with_capacity(v.rows() * len);
        for r in 0..v.rows() {
            out.extend_from_slice(&v.row_slice(r)[start..start + len]);
        }
        let value = Tensor::new(v.rows(), len, out);
        self.push(Op::SliceCols { src: a, start }, value, "slice_cols")
    }

    /// Embeds `a` at column offset `start` in a zero tensor with `total` columns.
    pub fn pad_cols(&mut self, a: NodeId, total: usize, start: usize) -> Result<NodeId, AdError> {
        let v = &self.nodes[a.0].value;
        if start + v.cols() > total {
            return Err(self.shape_err("pad_cols", format!("{:?} at {} into {} cols", v.shape(), start, total)));
        }
        let mut out = vec![0.0; v.rows() * total];
        for r in 0..v.rows() {
            out[r * total + start..r * total + start + v.cols()].copy_from_slice(v.row_slice(r));
        }
        let value = Tensor::new(v.rows(), total, out);
        self.push(Op::PadCols { src: a, start }, value, "pad_cols")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, AdError> {
        if parts.is_empty() {
            return Err(self.shape_err("concat_cols", "no parts".into()));
        }
        let rows = self.nodes[parts[0].0].value.rows();
        if parts.iter().any(|p| self.nodes[p.0].value.rows() != rows) {
            return Err(self.shape_err("concat_cols", "row counts differ".into()));
        }
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row_slice(r));
            }
        }
        let value = Tensor::new(rows, total, out);
        self.push(Op::ConcatCols(parts.to_vec()), value, "concat_cols")
    }

    // ----- batched small-matrix ops (one matrix per row, row-major) -----

    /// Per-row product of an `n×k` matrix with a `k×m` matrix.
    pub fn bmatmul(&mut self, a: NodeId, b: NodeId, n: usize, k: usize, m: usize) -> Result<NodeId, AdError> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.cols() != n * k || bv.cols() != k * m || av.rows() != bv.rows() {
            return Err(self.shape_err("bmatmul", format!("{:?} ({n}x{k}) x {:?} ({k}x{m})", av.shape(), bv.shape())));
        }
        let rows = av.rows();
        let mut out = Vec::with_capacity(rows * n * m);
        for r in 0..rows {
            out.extend(matmul(av.row_slice(r), bv.row_slice(r), n, k, m));
        }
        let value = Tensor::new(rows, n * m, out);
        self.push(Op::BMatMul { a, b, n, k, m }, value, "bmatmul")
    }

    /// Per-row transpose of an `r×c` matrix.
    pub fn btranspose(&mut self, a: NodeId, r: usize, c: usize) -> Result<NodeId, AdError> {
        let av = &self.nodes[a.0].value;
        if av.cols() != r * c {
            return Err(self.shape_err("btranspose", format!("{:?} as {r}x{c}", av.shape())));
        }
        let mut out = Vec::with_capacity(av.len());
        for row in 0..av.rows() {
            out.extend(Tensor::new(r, c, av.row_slice(row).to_vec()).transpose().into_data());
        }
        let value = Tensor::new(av.rows(), r * c, out);
        self.push(Op::BTranspose { a, r, c }, value, "btranspose")
    }

    /// Per-row solve of `A x = rhs` with `A` an `n×n` matrix.
    pub fn bsolve(&mut self, a: NodeId, rhs: NodeId, n: usize) -> Result<NodeId, AdError> {
        let av = &self.nodes[a.0].value;
        let rv = &self.nodes[rhs.0].value;
        if av.cols() != n * n || rv.cols() != n || av.rows() != rv.rows() {
            return Err(self.shape_err("bsolve", format!("{:?} ({n}x{n}) \\ {:?}", av.shape(), rv.shape())));
        }
        let node = self.next_id();
        let mut out = Vec::with_capacity(rv.len());
        for r in 0..av.rows() {
            let lu = SmallLu::factor(av.row_slice(r), n).ok_or(AdError::Singular { node, condition: f64::INFINITY })?;
            let cond = lu.condition_1(av.row_slice(r));
            if !(cond <= MAX_CONDITION) {
                return Err(AdError::Singular { node, condition: cond });
            }
            out.extend(lu.solve(rv.row_slice(r)));
        }
        let value = Tensor::new(av.rows(), n, out);
        self.push(Op::BSolve { a, rhs, n }, value, "bsolve")
    }

    // ----- reverse pass -----

    /// Reverse-mode sweep from `output` seeded with `seed`.
    ///
    /// Adjoints accumulate by summation. Nodes that do not depend on any
    /// variable or parameter are skipped.
    pub fn backward(&self, output: NodeId, seed: &Tensor) -> Result<Gradients, AdError> {
        if output.0 >= self.nodes.len() {
            return Err(AdError::UnknownNode(output.0));
        }
        let out_shape = self.nodes[output.0].value.shape();
        if seed.shape() != out_shape {
            return Err(AdError::Shape {
                op: "backward",
                node: output.0,
                detail: format!("seed {:?} vs output {:?}", seed.shape(), out_shape),
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(seed.clone());
        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                adj[idx] = Some(g);
                continue;
            }
            self.vjp(idx, &g, &mut adj)?;
        }
        Ok(Gradients { grads: adj })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut adj[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn vjp(&self, idx: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<(), AdError> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let shape = y.shape();
                let need_a = self.nodes[a.0].requires_grad;
                let need_b = self.nodes[b.0].requires_grad;
                let (ga, gb) = match kind {
                    Binary::Add => (g.clone(), g.clone()),
                    Binary::Sub => (g.clone(), g.map(|v| -v)),
                    Binary::Mul => (
                        if need_a { broadcast_apply(g, bv, shape, |x, y| x * y) } else { g.clone() },
                        if need_b { broadcast_apply(g, av, shape, |x, y| x * y) } else { g.clone() },
                    ),
                    Binary::Div => {
                        let ga = if need_a { broadcast_apply(g, bv, shape, |x, y| x / y) } else { g.clone() };
                        let gb = if need_b {
                            let t = broadcast_apply(g, av, shape, |x, y| x * y);
                            broadcast_apply(&t, bv, shape, |x, y| -x / (y * y))
                        } else {
                            g.clone()
                        };
                        (ga, gb)
                    }
                };
                if need_a {
                    self.accumulate(adj, *a, reduce_to(ga, av.shape()));
                }
                if need_b {
                    self.accumulate(adj, *b, reduce_to(gb, bv.shape()));
                }
            }
            Op::Unary(kind, a) => {
                let x = &self.nodes[a.0].value;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y.data())
                    .map(|((gv, xv), yv)| gv * kind.derivative(*xv, *yv))
                    .collect();
                self.accumulate(adj, *a, Tensor::new(x.rows(), x.cols(), data));
            }
            Op::Neg(a) => self.accumulate(adj, *a, g.map(|v| -v)),
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(adj, *a, g.map(|v| v * s))
            }
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (r, k, c) = (av.rows(), av.cols(), bv.cols());
                if self.nodes[a.0].requires_grad {
                    let ga = matmul_nt(g.data(), bv.data(), r, c, k);
                    self.accumulate(adj, *a, Tensor::new(r, k, ga));
                }
                if self.nodes[b.0].requires_grad {
                    let gb = matmul_tn(av.data(), g.data(), r, k, c);
                    self.accumulate(adj, *b, Tensor::new(k, c, gb));
                }
            }
            Op::Transpose(a) => self.accumulate(adj, *a, g.transpose()),
            Op::Sum(a) => {
                let s = self.nodes[a.0].value.shape();
                self.accumulate(adj, *a, Tensor::filled(s[0], s[1], g.item()));
            }
            Op::Mean(a) => {
                let s = self.nodes[a.0].value.shape();
                let n = (s[0] * s[1]) as f64;
                self.accumulate(adj, *a, Tensor::filled(s[0], s[1], g.item() / n));
            }
            Op::SumRows(a) | Op::SumCols(a) => {
                let s = self.nodes[a.0].value.shape();
                let t = broadcast_apply(g, &Tensor::zeros(s[0], s[1]), s, |x, _| x);
                self.accumulate(adj, *a, t);
            }
            Op::Broadcast(a) => {
                let s = self.nodes[a.0].value.shape();
                self.accumulate(adj, *a, reduce_to(g.clone(), s));
            }
            Op::SliceCols { src, start } => {
                let total = self.nodes[src.0].value.cols();
                let mut out = vec![0.0; g.rows() * total];
                for r in 0..g.rows() {
                    out[r * total + start..r * total + start + g.cols()].copy_from_slice(g.row_slice(r));
                }
                self.accumulate(adj, *src, Tensor::new(g.rows(), total, out));
            }
            Op::PadCols { src, start } => {
                let len = self.nodes[src.0].value.cols();
                let mut out = Vec::with_capacity(g.rows() * len);
                for r in 0..g.rows() {
                    out.extend_from_slice(&g.row_slice(r)[*start..start + len]);
                }
                self.accumulate(adj, *src, Tensor::new(g.rows(), len, out));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.cols();
                    if self.nodes[p.0].requires_grad {
                        let mut out = Vec::with_capacity(g.rows() * len);
                        for r in 0..g.rows() {
                            out.extend_from_slice(&g.row_slice(r)[offset..offset + len]);
                        }
                        self.accumulate(adj, *p, Tensor::new(g.rows(), len, out));
                    }
                    offset += len;
                }
            }
            Op::BMatMul { a, b, n, k, m } => {
                let (n, k, m) = (*n, *k, *m);
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let rows = av.rows();
                if self.nodes[a.0].requires_grad {
                    let mut out = Vec::with_capacity(rows * n * k);
                    for r in 0..rows {
                        out.extend(matmul_nt(g.row_slice(r), bv.row_slice(r), n, m, k));
                    }
                    self.accumulate(adj, *a, Tensor::new(rows, n * k, out));
                }
                if self.nodes[b.0].requires_grad {
                    let mut out = Vec::with_capacity(rows * k * m);
                    for r in 0..rows {
                        out.extend(matmul_tn(av.row_slice(r), g.row_slice(r), n, k, m));
                    }
                    self.accumulate(adj, *b, Tensor::new(rows, k * m, out));
                }
            }
            Op::BTranspose { a, r, c } => {
                let mut out = Vec::with_capacity(g.len());
                for row in 0..g.rows() {
                    out.extend(Tensor::new(*c, *r, g.row_slice(row).to_vec()).transpose().into_data());
                }
                self.accumulate(adj, *a, Tensor::new(g.rows(), r * c, out));
            }
            Op::BSolve { a, rhs, n } => {
                let n = *n;
                let av = &self.nodes[a.0].value;
                let rows = av.rows();
                let mut g_rhs = Vec::with_capacity(rows * n);
                let mut g_a = Vec::with_capacity(rows * n * n);
                for r in 0..rows {
                    let at = Tensor::new(n, n, av.row_slice(r).to_vec()).transpose();
                    let lu = SmallLu::factor(at.data(), n)
                        .ok_or(AdError::Singular { node: idx, condition: f64::INFINITY })?;
                    let gr = lu.solve(g.row_slice(r));
                    let x = y.row_slice(r);
                    for i in 0..n {
                        for j in 0..n {
                            g_a.push(-gr[i] * x[j]);
                        }
                    }
                    g_rhs.extend(gr);
                }
                if self.nodes[rhs.0].requires_grad {
                    self.accumulate(adj, *rhs, Tensor::new(rows, n, g_rhs));
                }
                if self.nodes[a.0].requires_grad {
                    self.accumulate(adj, *a, Tensor::new(rows, n * n, g_a));
                }
            }
        }
        Ok(())
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `id`, or `None` when `id` does not influence the output.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Adjoint of `id` with zeros filled in for unreachable nodes.
    pub fn get_or_zero(&self, graph: &Graph, id: NodeId) -> Tensor {
        match self.get(id) {
            Some(t) => t.clone(),
            None => {
                let [r, c] = graph.shape(id);
                Tensor::zeros(r, c)
            }
        }
    }

    /// Gradient for every named parameter leaf of `graph`.
    pub fn named(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        graph.params().into_iter().map(|(name, id)| (name, self.get_or_zero(graph, id))).collect()
    }
}

pub(crate) fn broadcast_shape(a: [usize; 2], b: [usize; 2]) -> Option<[usize; 2]> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some([dim(a[0], b[0])?, dim(a[1], b[1])?])
}

fn broadcast_apply(a: &Tensor, b: &Tensor, out: [usize; 2], f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == out && b.shape() == out {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        return Tensor::new(out[0], out[1], data);
    }
    let [ar, ac] = a.shape();
    let [br, bc] = b.shape();
    let mut data = Vec::with_capacity(out[0] * out[1]);
    for i in 0..out[0] {
        let ia = if ar == 1 { 0 } else { i };
        let ib = if br == 1 { 0 } else { i };
        for j in 0..out[1] {
            let ja = if ac == 1 { 0 } else { j };
            let jb = if bc == 1 { 0 } else { j };
            data.push(f(a.data()[ia * ac + ja], b.data()[ib * bc + jb]));
        }
    }
    Tensor::new(out[0], out[1], data)
}

/// Sums a broadcast adjoint back down to `shape`.
fn reduce_to(g: Tensor, shape: [usize; 2]) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    let [gr, gc] = g.shape();
    let mut out = Tensor::zeros(shape[0], shape[1]);
    for i in 0..gr {
        let oi = if shape[0] == 1 { 0 } else { i };
        for j in 0..gc {
            let oj = if shape[1] == 1 { 0 } else { j };
            let cur = out.get(oi, oj);
            out.set(oi, oj, cur + g.get(i, j));
        }
    }
    out
}

/// LU factorization with partial pivoting for tiny dense matrices.
pub(crate) struct SmallLu {
    n: usize,
    lu: Vec<f64>,
    piv: Vec<usize>,
}

impl SmallLu {
    pub(crate) fn factor(a: &[f64], n: usize) -> Option<Self> {
        let mut lu = a.to_vec();
        let mut piv: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for i in k + 1..n {
                let v = lu[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return None;
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                piv.swap(k, p);
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                for j in k + 1..n {
                    lu[i * n + j] -= f * lu[k * n + j];
                }
            }
        }
        Some(Self { n, lu, piv })
    }

    pub(crate) fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.piv.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                x[i] -= self.lu[i * n + j] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= self.lu[i * n + j] * x[j];
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }

    /// 1-norm condition number `‖A‖₁‖A⁻¹‖₁`, computed exactly (n is small).
    pub(crate) fn condition_1(&self, a: &[f64]) -> f64 {
        let n = self.n;
        let norm = |m: &dyn Fn(usize, usize) -> f64| {
            (0..n).map(|j| (0..n).map(|i| m(i, j).abs()).sum::<f64>()).fold(0.0, f64::max)
        };
        let a_norm = norm(&|i, j| a[i * n + j]);
        let mut inv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        a_norm * norm(&|i, j| inv[i * n + j])
    }
}
