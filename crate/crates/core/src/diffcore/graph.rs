//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are recorded eagerly in topological order: every operation method
//! evaluates immediately and appends a node, so the recorded trace reflects
//! exactly the computation that ran (including any value-dependent control
//! flow in the caller). `forward` re-executes the trace against rebound
//! leaves; `backward` sweeps the trace in reverse accumulating
//! vector-Jacobian products.
//!
//! The primitive set is deliberately small: what a tanh MLP, the projection
//! solvers, and their losses need, nothing more.

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::linalg;
use std::collections::BTreeMap;
use std::fmt;

pub type NodeId = usize;

/// An operation whose forward/backward pair is opaque to the tape.
///
/// Used to splice externally-differentiated blocks (e.g. a projection with an
/// implicit backward pass) into a recorded graph.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&DenseArray]) -> Result<DenseArray>;
    /// Vector-Jacobian products with respect to each input.
    fn vjp(
        &self,
        inputs: &[&DenseArray],
        output: &DenseArray,
        upstream: &DenseArray,
    ) -> Result<Vec<DenseArray>>;
}

enum Op {
    Leaf(String),
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    /// (m,k) x (k,n) -> (m,n), or (m,k) x (k,) -> (m,).
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    Sqrt(NodeId),
    /// Elementwise max(x, 0).
    Max0(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Flat slice [start, start+len) of the input's data.
    Slice {
        input: NodeId,
        start: usize,
        len: usize,
    },
    /// Flat 1-D concatenation.
    Concat(Vec<NodeId>),
    Reshape(NodeId, Vec<usize>),
    /// Row-broadcast add: (B,H) + (H,) per row.
    AddRows(NodeId, NodeId),
    /// Solve (M + eps_eff I) x = rhs for symmetric M, with the adaptive
    /// factorization fallback (eps x10 per retry, bounded retries).
    SolveSpd {
        mat: NodeId,
        rhs: NodeId,
        eps: f64,
        max_retries: usize,
    },
    Custom {
        op: Box<dyn CustomOp>,
        inputs: Vec<NodeId>,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Tanh(..) => "tanh",
            Op::Sqrt(..) => "sqrt",
            Op::Max0(..) => "max0",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Slice { .. } => "slice",
            Op::Concat(..) => "concat",
            Op::Reshape(..) => "reshape",
            Op::AddRows(..) => "add_rows",
            Op::SolveSpd { .. } => "solve_spd",
            Op::Custom { .. } => "custom",
        }
    }
}

/// Per-node auxiliary state kept from the forward pass for reuse in backward.
enum Aux {
    Chol { factor: Vec<f64>, n: usize },
}

pub struct Graph {
    ops: Vec<Op>,
    vals: Vec<DenseArray>,
    aux: Vec<Option<Aux>>,
    leaves: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    evaluated: bool,
}

/// Gradients returned by a backward sweep.
pub struct Gradients {
    by_node: Vec<Option<DenseArray>>,
    leaves: BTreeMap<String, NodeId>,
}

impl Gradients {
    /// VJP with respect to a named leaf; zero-shaped leaves that the output
    /// does not depend on yield `None`.
    pub fn wrt_leaf(&self, name: &str) -> Option<&DenseArray> {
        self.leaves
            .get(name)
            .and_then(|&id| self.by_node[id].as_ref())
    }

    pub fn wrt(&self, node: NodeId) -> Option<&DenseArray> {
        self.by_node.get(node).and_then(|g| g.as_ref())
    }

    /// All leaf VJPs, with zeros for untouched leaves of known shape.
    pub fn leaf_map(&self, graph: &Graph) -> BTreeMap<String, DenseArray> {
        self.leaves
            .iter()
            .map(|(name, &id)| {
                let g = self.by_node[id]
                    .clone()
                    .unwrap_or_else(|| DenseArray::zeros(graph.vals[id].shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Graph({} nodes, {} leaves)", self.ops.len(), self.leaves.len())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            ops: Vec::new(),
            vals: Vec::new(),
            aux: Vec::new(),
            leaves: BTreeMap::new(),
            outputs: BTreeMap::new(),
            evaluated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseArray {
        &self.vals[id]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.vals[id].shape()
    }

    /// Mark a node as a named output of the graph.
    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    fn push(&mut self, op: Op, val: DenseArray) -> NodeId {
        let id = self.ops.len();
        self.ops.push(op);
        self.vals.push(val);
        self.aux.push(None);
        self.evaluated = true;
        id
    }

    fn err_shape(&self, node_kind: &str, id: usize, expected: &[usize], got: &[usize]) -> Error {
        Error::ShapeMismatch {
            context: format!("node {id} ({node_kind})"),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub fn leaf(&mut self, name: &str, value: DenseArray) -> Result<NodeId> {
        if self.leaves.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate leaf '{name}'")));
        }
        let id = self.push(Op::Leaf(name.to_string()), value);
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: DenseArray) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(DenseArray::scalar(value))
    }

    fn binary_same_shape(&mut self, op: fn(NodeId, NodeId) -> Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.vals[a].shape() != self.vals[b].shape() {
            let id = self.ops.len();
            return Err(self.err_shape(
                op(a, b).kind(),
                id,
                self.vals[a].shape(),
                self.vals[b].shape(),
            ));
        }
        let o = op(a, b);
        let val = self.eval_binary(&o, a, b)?;
        Ok(self.push(o, val))
    }

    fn eval_binary(&self, op: &Op, a: NodeId, b: NodeId) -> Result<DenseArray> {
        let (va, vb) = (&self.vals[a], &self.vals[b]);
        match op {
            Op::Add(..) => va.add(vb),
            Op::Sub(..) => va.sub(vb),
            Op::Mul(..) => va.zip(vb, |x, y| x * y),
            Op::Div(..) => va.zip(vb, |x, y| x / y),
            _ => unreachable!(),
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let id = self.binary_same_shape(Op::Div, a, b)?;
        self.check_finite(id)?;
        Ok(id)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let val = self.vals[a].scale(-1.0);
        self.push(Op::Neg(a), val)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let val = self.vals[a].scale(c);
        self.push(Op::Scale(a, c), val)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let val = self.vals[a].map(|v| v + c);
        self.push(Op::AddScalar(a, c), val)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let val = self.vals[a].map(f64::tanh);
        self.push(Op::Tanh(a), val)
    }

    /// Elementwise square root; input entries must be strictly positive so
    /// the derivative stays finite.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if self.vals[a].data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite {
                context: format!("node {} (sqrt of non-positive input)", self.ops.len()),
            });
        }
        let val = self.vals[a].map(f64::sqrt);
        Ok(self.push(Op::Sqrt(a), val))
    }

    pub fn max0(&mut self, a: NodeId) -> NodeId {
        let val = self.vals[a].map(|v| v.max(0.0));
        self.push(Op::Max0(a), val)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let val = DenseArray::scalar(self.vals[a].sum());
        self.push(Op::Sum(a), val)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let val = DenseArray::scalar(self.vals[a].mean());
        self.push(Op::Mean(a), val)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let val = self.eval_matmul(a, b)?;
        Ok(self.push(Op::MatMul(a, b), val))
    }

    fn eval_matmul(&self, a: NodeId, b: NodeId) -> Result<DenseArray> {
        let (va, vb) = (&self.vals[a], &self.vals[b]);
        let sa = va.shape();
        let sb = vb.shape();
        match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => {
                let data = linalg::matmul(va.data(), vb.data(), sa[0], sa[1], sb[1]);
                DenseArray::new(vec![sa[0], sb[1]], data)
            }
            (2, 1) if sa[1] == sb[0] => {
                let data = linalg::matvec(va.data(), vb.data(), sa[0], sa[1]);
                DenseArray::new(vec![sa[0]], data)
            }
            _ => Err(self.err_shape("matmul", self.ops.len(), sa, sb)),
        }
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.vals[a].shape().to_vec();
        if s.len() != 2 {
            return Err(self.err_shape("transpose", self.ops.len(), &[0, 0], &s));
        }
        let data = linalg::transpose(self.vals[a].data(), s[0], s[1]);
        let val = DenseArray::new(vec![s[1], s[0]], data)?;
        Ok(self.push(Op::Transpose(a), val))
    }

    pub fn slice(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let total = self.vals[input].len();
        if start + len > total {
            return Err(Error::InvalidArgument(format!(
                "slice [{start}, {}) out of bounds for {total} elements",
                start + len
            )));
        }
        let data = self.vals[input].data()[start..start + len].to_vec();
        Ok(self.push(Op::Slice { input, start, len }, DenseArray::from_vec(data)))
    }

    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("concat of zero nodes".into()));
        }
        let mut data = Vec::new();
        for &i in inputs {
            data.extend_from_slice(self.vals[i].data());
        }
        Ok(self.push(Op::Concat(inputs.to_vec()), DenseArray::from_vec(data)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let val = self.vals[a].reshaped(shape)?;
        Ok(self.push(Op::Reshape(a, shape.to_vec()), val))
    }

    pub fn add_rows(&mut self, mat: NodeId, row: NodeId) -> Result<NodeId> {
        let val = self.eval_add_rows(mat, row)?;
        Ok(self.push(Op::AddRows(mat, row), val))
    }

    fn eval_add_rows(&self, mat: NodeId, row: NodeId) -> Result<DenseArray> {
        let vm = &self.vals[mat];
        let vr = &self.vals[row];
        let sm = vm.shape();
        if sm.len() != 2 || vr.shape() != [sm[1]] {
            return Err(self.err_shape("add_rows", self.ops.len(), sm, vr.shape()));
        }
        let h = sm[1];
        let mut data = vm.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += vr.data()[i % h];
        }
        DenseArray::new(sm.to_vec(), data)
    }

    /// Differentiable solve of `(M + eps_eff I) x = rhs` with `M` symmetric.
    /// The factorization fallback escalates eps by 10x per retry.
    pub fn solve_spd(
        &mut self,
        mat: NodeId,
        rhs: NodeId,
        eps: f64,
        max_retries: usize,
    ) -> Result<NodeId> {
        let op = Op::SolveSpd {
            mat,
            rhs,
            eps,
            max_retries,
        };
        let (val, aux) = self.eval_solve(mat, rhs, eps, max_retries)?;
        let id = self.push(op, val);
        self.aux[id] = Some(aux);
        self.check_finite(id)?;
        Ok(id)
    }

    fn eval_solve(
        &self,
        mat: NodeId,
        rhs: NodeId,
        eps: f64,
        max_retries: usize,
    ) -> Result<(DenseArray, Aux)> {
        let vm = &self.vals[mat];
        let vr = &self.vals[rhs];
        let sm = vm.shape();
        if sm.len() != 2 || sm[0] != sm[1] || vr.len() != sm[0] {
            return Err(self.err_shape("solve_spd", self.ops.len(), sm, vr.shape()));
        }
        let n = sm[0];
        let (factor, _eps_used) = linalg::cholesky_damped(vm.data(), n, eps, max_retries)?;
        let x = linalg::cholesky_solve(&factor, vr.data(), n);
        let val = DenseArray::new(vr.shape().to_vec(), x)?;
        Ok((val, Aux::Chol { factor, n }))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[NodeId]) -> Result<NodeId> {
        let in_vals: Vec<&DenseArray> = inputs.iter().map(|&i| &self.vals[i]).collect();
        let val = op.forward(&in_vals)?;
        let id = self.push(
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            val,
        );
        self.check_finite(id)?;
        Ok(id)
    }

    fn check_finite(&self, id: NodeId) -> Result<()> {
        if !self.vals[id].all_finite() {
            return Err(Error::NonFinite {
                context: format!("node {id} ({})", self.ops[id].kind()),
            });
        }
        Ok(())
    }

    /// Re-execute the recorded trace with leaves rebound to `leaves`.
    /// Returns the marked outputs. Re-running with identical leaves yields
    /// bit-identical results.
    pub fn forward(
        &mut self,
        leaves: &BTreeMap<String, DenseArray>,
    ) -> Result<BTreeMap<String, DenseArray>> {
        for (name, id) in self.leaves.clone() {
            let bound = leaves.get(&name).ok_or_else(|| {
                Error::InvalidArgument(format!("leaf '{name}' not bound in forward"))
            })?;
            if bound.shape() != self.vals[id].shape() {
                return Err(self.err_shape(
                    "leaf",
                    id,
                    self.vals[id].shape(),
                    bound.shape(),
                ));
            }
            self.vals[id] = bound.clone();
        }
        self.reeval()?;
        Ok(self
            .outputs
            .iter()
            .map(|(name, &id)| (name.clone(), self.vals[id].clone()))
            .collect())
    }

    /// Re-evaluate every non-leaf node in topological order.
    fn reeval(&mut self) -> Result<()> {
        for id in 0..self.ops.len() {
            let val = match &self.ops[id] {
                Op::Leaf(_) | Op::Const => continue,
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                    let op = &self.ops[id];
                    self.eval_binary(op, *a, *b)?
                }
                Op::Neg(a) => self.vals[*a].scale(-1.0),
                Op::Scale(a, c) => self.vals[*a].scale(*c),
                Op::AddScalar(a, c) => {
                    let c = *c;
                    self.vals[*a].map(|v| v + c)
                }
                Op::MatMul(a, b) => self.eval_matmul(*a, *b)?,
                Op::Transpose(a) => {
                    let s = self.vals[*a].shape().to_vec();
                    let data = linalg::transpose(self.vals[*a].data(), s[0], s[1]);
                    DenseArray::new(vec![s[1], s[0]], data)?
                }
                Op::Tanh(a) => self.vals[*a].map(f64::tanh),
                Op::Sqrt(a) => {
                    if self.vals[*a].data().iter().any(|&v| v <= 0.0) {
                        return Err(Error::NonFinite {
                            context: format!("node {id} (sqrt of non-positive input)"),
                        });
                    }
                    self.vals[*a].map(f64::sqrt)
                }
                Op::Max0(a) => self.vals[*a].map(|v| v.max(0.0)),
                Op::Sum(a) => DenseArray::scalar(self.vals[*a].sum()),
                Op::Mean(a) => DenseArray::scalar(self.vals[*a].mean()),
                Op::Slice { input, start, len } => {
                    let data = self.vals[*input].data()[*start..*start + *len].to_vec();
                    DenseArray::from_vec(data)
                }
                Op::Concat(inputs) => {
                    let mut data = Vec::new();
                    for &i in inputs {
                        data.extend_from_slice(self.vals[i].data());
                    }
                    DenseArray::from_vec(data)
                }
                Op::Reshape(a, shape) => self.vals[*a].reshaped(shape)?,
                Op::AddRows(mat, row) => self.eval_add_rows(*mat, *row)?,
                Op::SolveSpd {
                    mat,
                    rhs,
                    eps,
                    max_retries,
                } => {
                    let (val, aux) = self.eval_solve(*mat, *rhs, *eps, *max_retries)?;
                    self.aux[id] = Some(aux);
                    val
                }
                Op::Custom { op, inputs } => {
                    let in_vals: Vec<&DenseArray> =
                        inputs.iter().map(|&i| &self.vals[i]).collect();
                    op.forward(&in_vals)?
                }
            };
            if !val.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("node {id} ({})", self.ops[id].kind()),
                });
            }
            self.vals[id] = val;
        }
        Ok(())
    }

    /// Reverse sweep from `output` seeded with `seed_grad`. Returns VJPs for
    /// every node the output depends on; query leaves by name.
    pub fn backward(&self, output: NodeId, seed_grad: &DenseArray) -> Result<Gradients> {
        if !self.evaluated {
            return Err(Error::BackwardBeforeForward);
        }
        if seed_grad.shape() != self.vals[output].shape() {
            return Err(self.err_shape(
                "backward seed",
                output,
                self.vals[output].shape(),
                seed_grad.shape(),
            ));
        }
        let mut grads: Vec<Option<DenseArray>> = vec![None; self.ops.len()];
        grads[output] = Some(seed_grad.clone());

        for id in (0..=output).rev() {
            let Some(u) = grads[id].take() else { continue };
            self.backprop_node(id, &u, &mut grads)?;
            grads[id] = Some(u);
        }

        Ok(Gradients {
            by_node: grads,
            leaves: self.leaves.clone(),
        })
    }

    fn accumulate(grads: &mut [Option<DenseArray>], id: NodeId, g: DenseArray) {
        match &mut grads[id] {
            Some(acc) => {
                let sum = acc.add(&g).expect("gradient shape agreement");
                *acc = sum;
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(
        &self,
        id: NodeId,
        u: &DenseArray,
        grads: &mut [Option<DenseArray>],
    ) -> Result<()> {
        match &self.ops[id] {
            Op::Leaf(_) | Op::Const => {}
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, u.clone());
                Self::accumulate(grads, *b, u.clone());
            }
            Op::Sub(a, b) => {
                Self::accumulate(grads, *a, u.clone());
                Self::accumulate(grads, *b, u.scale(-1.0));
            }
            Op::Mul(a, b) => {
                Self::accumulate(grads, *a, u.zip(&self.vals[*b], |g, y| g * y)?);
                Self::accumulate(grads, *b, u.zip(&self.vals[*a], |g, x| g * x)?);
            }
            Op::Div(a, b) => {
                let vb = &self.vals[*b];
                Self::accumulate(grads, *a, u.zip(vb, |g, y| g / y)?);
                let y = &self.vals[id];
                let gb = u
                    .zip(y, |g, out| g * out)?
                    .zip(vb, |gy, den| -gy / den)?;
                Self::accumulate(grads, *b, gb);
            }
            Op::Neg(a) => Self::accumulate(grads, *a, u.scale(-1.0)),
            Op::Scale(a, c) => Self::accumulate(grads, *a, u.scale(*c)),
            Op::AddScalar(a, _) => Self::accumulate(grads, *a, u.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.vals[*a], &self.vals[*b]);
                let (sa, sb) = (va.shape(), vb.shape());
                if sb.len() == 2 {
                    // gA = u B^T, gB = A^T u
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let bt = linalg::transpose(vb.data(), k, n);
                    let ga = linalg::matmul(u.data(), &bt, m, n, k);
                    let at = linalg::transpose(va.data(), m, k);
                    let gb = linalg::matmul(&at, u.data(), k, m, n);
                    Self::accumulate(grads, *a, DenseArray::new(vec![m, k], ga)?);
                    Self::accumulate(grads, *b, DenseArray::new(vec![k, n], gb)?);
                } else {
                    // gA = outer(u, b), gb = A^T u
                    let (m, k) = (sa[0], sa[1]);
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..k {
                            ga[i * k + j] = u.data()[i] * vb.data()[j];
                        }
                    }
                    let gb = linalg::matvec_t(va.data(), u.data(), m, k);
                    Self::accumulate(grads, *a, DenseArray::new(vec![m, k], ga)?);
                    Self::accumulate(grads, *b, DenseArray::new(vec![k], gb)?);
                }
            }
            Op::Transpose(a) => {
                let s = self.vals[id].shape();
                let g = linalg::transpose(u.data(), s[0], s[1]);
                Self::accumulate(grads, *a, DenseArray::new(vec![s[1], s[0]], g)?);
            }
            Op::Tanh(a) => {
                let y = &self.vals[id];
                Self::accumulate(grads, *a, u.zip(y, |g, t| g * (1.0 - t * t))?);
            }
            Op::Sqrt(a) => {
                let y = &self.vals[id];
                Self::accumulate(grads, *a, u.zip(y, |g, s| g / (2.0 * s))?);
            }
            Op::Max0(a) => {
                let va = &self.vals[*a];
                Self::accumulate(grads, *a, u.zip(va, |g, x| if x > 0.0 { g } else { 0.0 })?);
            }
            Op::Sum(a) => {
                let g = DenseArray::full(self.vals[*a].shape(), u.item());
                Self::accumulate(grads, *a, g);
            }
            Op::Mean(a) => {
                let n = self.vals[*a].len() as f64;
                let g = DenseArray::full(self.vals[*a].shape(), u.item() / n);
                Self::accumulate(grads, *a, g);
            }
            Op::Slice { input, start, len } => {
                let mut g = DenseArray::zeros(self.vals[*input].shape());
                g.data_mut()[*start..*start + *len].copy_from_slice(u.data());
                Self::accumulate(grads, *input, g);
            }
            Op::Concat(inputs) => {
                let mut off = 0;
                for &i in inputs {
                    let n = self.vals[i].len();
                    let mut g = DenseArray::zeros(self.vals[i].shape());
                    g.data_mut().copy_from_slice(&u.data()[off..off + n]);
                    Self::accumulate(grads, i, g);
                    off += n;
                }
            }
            Op::Reshape(a, _) => {
                Self::accumulate(grads, *a, u.reshaped(self.vals[*a].shape())?);
            }
            Op::AddRows(mat, row) => {
                Self::accumulate(grads, *mat, u.clone());
                let s = self.vals[*mat].shape();
                let (b, h) = (s[0], s[1]);
                let mut gr = vec![0.0; h];
                for i in 0..b {
                    for j in 0..h {
                        gr[j] += u.data()[i * h + j];
                    }
                }
                Self::accumulate(grads, *row, DenseArray::new(vec![h], gr)?);
            }
            Op::SolveSpd { mat, rhs, .. } => {
                // x = M_eff^{-1} r:  g_r = M_eff^{-1} u,  g_M = -g_r x^T
                let Some(Aux::Chol { factor, n }) = &self.aux[id] else {
                    return Err(Error::BackwardBeforeForward);
                };
                let gr = linalg::cholesky_solve(factor, u.data(), *n);
                let x = self.vals[id].data();
                let mut gm = vec![0.0; n * n];
                for i in 0..*n {
                    for j in 0..*n {
                        gm[i * n + j] = -gr[i] * x[j];
                    }
                }
                Self::accumulate(grads, *mat, DenseArray::new(vec![*n, *n], gm)?);
                Self::accumulate(grads, *rhs, DenseArray::new(vec![*n], gr)?);
            }
            Op::Custom { op, inputs } => {
                let in_vals: Vec<&DenseArray> = inputs.iter().map(|&i| &self.vals[i]).collect();
                let gs = op.vjp(&in_vals, &self.vals[id], u)?;
                if gs.len() != inputs.len() {
                    return Err(Error::InvalidArgument(format!(
                        "custom op '{}' returned {} VJPs for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (&i, g) in inputs.iter().zip(gs) {
                    Self::accumulate(grads, i, g);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_leaf_roundtrip() {
        let mut g = Graph::new();
        let x = g.leaf("x", DenseArray::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        g.mark_output("y", x);
        let mut leaves = BTreeMap::new();
        leaves.insert("x".to_string(), DenseArray::from_vec(vec![1.0, 2.0, 3.0]));
        let out = g.forward(&leaves).unwrap();
        assert_eq!(out["y"].data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn sum_forward_and_gradient() {
        let mut g = Graph::new();
        let x = g.leaf("x", DenseArray::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let s = g.sum(x);
        assert_eq!(g.value(s).item(), 6.0);
        let grads = g.backward(s, &DenseArray::scalar(1.0)).unwrap();
        assert_eq!(grads.wrt_leaf("x").unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        // f(x) = x*x elementwise at x=[3], seed 1 -> [6]
        let mut g = Graph::new();
        let x = g.leaf("x", DenseArray::from_vec(vec![3.0])).unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y, &DenseArray::from_vec(vec![1.0])).unwrap();
        assert_eq!(grads.wrt_leaf("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_seed_shape_checked() {
        let mut g = Graph::new();
        let x = g.leaf("x", DenseArray::from_vec(vec![1.0, 2.0])).unwrap();
        let s = g.sum(x);
        assert!(g.backward(s, &DenseArray::from_vec(vec![1.0, 1.0])).is_err());
    }

    #[test]
    fn forward_rejects_bad_leaf_shape() {
        let mut g = Graph::new();
        let x = g.leaf("x", DenseArray::from_vec(vec![1.0, 2.0])).unwrap();
        let s = g.sum(x);
        g.mark_output("s", s);
        let mut leaves = BTreeMap::new();
        leaves.insert("x".to_string(), DenseArray::from_vec(vec![1.0, 2.0, 3.0]));
        assert!(g.forward(&leaves).is_err());
    }

    #[test]
    fn matmul_vjp_shapes() {
        let mut g = Graph::new();
        let a = g
            .leaf("a", DenseArray::new(vec![2, 3], vec![1.0; 6]).unwrap())
            .unwrap();
        let b = g
            .leaf("b", DenseArray::new(vec![3, 2], vec![1.0; 6]).unwrap())
            .unwrap();
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s, &DenseArray::scalar(1.0)).unwrap();
        assert_eq!(grads.wrt_leaf("a").unwrap().shape(), &[2, 3]);
        assert_eq!(grads.wrt_leaf("b").unwrap().shape(), &[3, 2]);
    }

    #[test]
    fn solve_spd_value() {
        // M = [[2,0],[0,4]], r = [2,4] -> x = [1 - O(eps), 1 - O(eps)]
        let mut g = Graph::new();
        let m = g.constant(DenseArray::new(vec![2, 2], vec![2.0, 0.0, 0.0, 4.0]).unwrap());
        let r = g.leaf("r", DenseArray::from_vec(vec![2.0, 4.0])).unwrap();
        let x = g.solve_spd(m, r, 0.0, 6).unwrap();
        assert!((g.value(x).data()[0] - 1.0).abs() < 1e-12);
        assert!((g.value(x).data()[1] - 1.0).abs() < 1e-12);
        let grads = g.backward(x, &DenseArray::from_vec(vec![1.0, 0.0])).unwrap();
        // g_r = M^{-1} u = [0.5, 0]
        assert!((grads.wrt_leaf("r").unwrap().data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rerun_is_bit_identical() {
        let mut g = Graph::new();
        let x = g.leaf("x", DenseArray::from_vec(vec![0.3, -0.7])).unwrap();
        let t = g.tanh(x);
        let y = g.mul(t, t).unwrap();
        let s = g.sum(y);
        g.mark_output("s", s);
        let first = g.value(s).item();
        let mut leaves = BTreeMap::new();
        leaves.insert("x".to_string(), DenseArray::from_vec(vec![0.3, -0.7]));
        let out1 = g.forward(&leaves).unwrap();
        let out2 = g.forward(&leaves).unwrap();
        assert_eq!(out1["s"].data()[0].to_bits(), first.to_bits());
        assert_eq!(out1["s"].data()[0].to_bits(), out2["s"].data()[0].to_bits());
    }
}
