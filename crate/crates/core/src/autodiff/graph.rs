use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use super::{AutodiffError, Parameter, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied differentiable operation.
///
/// `forward` receives the input values in order and returns the output;
/// `backward` receives the same inputs, the cached output and the upstream
/// gradient and returns one gradient per input (same shapes as the inputs).
pub trait CustomOp: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError>;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Square(NodeId),
    ClampMin(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    SliceCols(NodeId, usize, usize),
    ConcatCols(NodeId, NodeId),
    CumsumCols(NodeId),
    Custom(Arc<dyn CustomOp>, Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Square(..) => "square",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::CumsumCols(..) => "cumsum_cols",
            Op::Custom(op, _) => op.name(),
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddRowBias(a, b)
            | Op::ConcatCols(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Square(a)
            | Op::ClampMin(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SliceCols(a, ..)
            | Op::CumsumCols(a) => vec![*a],
            Op::Custom(_, ins) => ins.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    param: Option<String>,
}

/// Numerically stable `ln(1 + e^x)`.
/// `tanh` through a single `exp`; within a few ulp of 1 in absolute terms
/// and roughly twice as fast as the libm version, which dominates training.
pub fn tanh(x: f64) -> f64 {
    let a = x.abs();
    if a < 5e-3 {
        let x2 = x * x;
        return x * (1.0 - x2 * (1.0 / 3.0 - x2 * (2.0 / 15.0)));
    }
    let e = (-2.0 * a).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Define-by-run tape. Values are computed eagerly as nodes are recorded and
/// can be recomputed with [`Graph::forward`] after leaves change.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    /// Leaf that does not receive gradients (data, masks).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false, None)
    }

    /// Leaf that receives a gradient but is not tied to a [`Parameter`].
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true, None)
    }

    pub fn parameter(&mut self, param: &Parameter) -> NodeId {
        self.push_leaf(param.tensor.clone(), true, Some(param.id.clone()))
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<String>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
            param,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Replaces a leaf value; the shape must not change.
    pub fn set_value(&mut self, id: NodeId, value: Tensor) -> Result<(), AutodiffError> {
        let node = self
            .nodes
            .get_mut(id.0)
            .ok_or(AutodiffError::UnknownNode(id.0))?;
        if !matches!(node.op, Op::Leaf) {
            return Err(AutodiffError::NotALeaf(id.0));
        }
        if node.value.shape() != value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                node: Some(id.0),
                op: "set_value",
                left: node.value.shape(),
                right: value.shape(),
            });
        }
        node.value = value;
        Ok(())
    }

    fn record(&mut self, op: Op) -> Result<NodeId, AutodiffError> {
        let index = self.nodes.len();
        for input in op.inputs() {
            if input.0 >= index {
                return Err(AutodiffError::UnknownNode(input.0));
            }
        }
        let value = self.evaluate(index, &op)?;
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            param: None,
        });
        Ok(NodeId(index))
    }

    fn evaluate(&self, index: usize, op: &Op) -> Result<Tensor, AutodiffError> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let mismatch = |a: &Tensor, b: &Tensor| AutodiffError::ShapeMismatch {
            node: Some(index),
            op: op.name(),
            left: a.shape(),
            right: b.shape(),
        };
        let out = match op {
            Op::Leaf => return Ok(self.nodes[index].value.clone()),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (x, y) = (v(a), v(b));
                if x.shape() != y.shape() {
                    return Err(mismatch(x, y));
                }
                match op {
                    Op::Add(..) => x.zip_map(y, |p, q| p + q),
                    Op::Sub(..) => x.zip_map(y, |p, q| p - q),
                    _ => x.zip_map(y, |p, q| p * q),
                }
            }
            Op::MatMul(a, b) => {
                let (x, y) = (v(a), v(b));
                if x.cols() != y.rows() {
                    return Err(mismatch(x, y));
                }
                x.gemm(false, y, false)
            }
            Op::AddRowBias(a, b) => {
                let (x, bias) = (v(a), v(b));
                if bias.rows() != 1 || bias.cols() != x.cols() {
                    return Err(mismatch(x, bias));
                }
                let mut out = x.clone();
                let cols = x.cols();
                if cols > 0 {
                    for row in out.data_mut().chunks_mut(cols) {
                        for (o, b) in row.iter_mut().zip(bias.data()) {
                            *o += b;
                        }
                    }
                }
                out
            }
            Op::Neg(a) => v(a).map(|x| -x),
            Op::Scale(a, c) => v(a).map(|x| x * c),
            Op::AddScalar(a, c) => v(a).map(|x| x + c),
            Op::Exp(a) => v(a).map(f64::exp),
            Op::Log(a) => v(a).map(f64::ln),
            Op::Tanh(a) => v(a).map(tanh),
            Op::Relu(a) => v(a).map(|x| x.max(0.0)),
            Op::Sigmoid(a) => v(a).map(sigmoid),
            Op::Softplus(a) => v(a).map(softplus),
            Op::Square(a) => v(a).map(|x| x * x),
            Op::ClampMin(a, floor) => v(a).map(|x| x.max(*floor)),
            Op::Sum(a) => Tensor::scalar(v(a).sum()),
            Op::Mean(a) => {
                let x = v(a);
                if x.is_empty() {
                    return Err(AutodiffError::EmptyReduction(index));
                }
                Tensor::scalar(x.sum() / x.len() as f64)
            }
            Op::SliceCols(a, start, end) => {
                let x = v(a);
                if start >= end || *end > x.cols() {
                    return Err(AutodiffError::BadSlice {
                        node: index,
                        start: *start,
                        end: *end,
                        cols: x.cols(),
                    });
                }
                let width = end - start;
                let mut data = Vec::with_capacity(x.rows() * width);
                for r in 0..x.rows() {
                    data.extend_from_slice(&x.row_slice(r)[*start..*end]);
                }
                Tensor::new(x.rows(), width, data)?
            }
            Op::ConcatCols(a, b) => {
                let (x, y) = (v(a), v(b));
                if x.rows() != y.rows() {
                    return Err(mismatch(x, y));
                }
                let cols = x.cols() + y.cols();
                let mut data = Vec::with_capacity(x.rows() * cols);
                for r in 0..x.rows() {
                    data.extend_from_slice(x.row_slice(r));
                    data.extend_from_slice(y.row_slice(r));
                }
                Tensor::new(x.rows(), cols, data)?
            }
            Op::CumsumCols(a) => {
                let mut out = v(a).clone();
                let cols = out.cols();
                if cols > 0 {
                    for row in out.data_mut().chunks_mut(cols) {
                        for j in 1..row.len() {
                            row[j] += row[j - 1];
                        }
                    }
                }
                out
            }
            Op::Custom(custom, ins) => {
                let inputs: Vec<&Tensor> = ins.iter().map(v).collect();
                custom.forward(&inputs).map_err(|e| match e {
                    AutodiffError::ShapeMismatch {
                        op, left, right, ..
                    } => AutodiffError::ShapeMismatch {
                        node: Some(index),
                        op,
                        left,
                        right,
                    },
                    other => other,
                })?
            }
        };
        Ok(out)
    }

    /// Recomputes every non-leaf node in recording order and returns the value
    /// of the last node.
    pub fn forward(&mut self) -> Result<&Tensor, AutodiffError> {
        for index in 0..self.nodes.len() {
            if matches!(self.nodes[index].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[index].op.clone();
            let value = self.evaluate(index, &op)?;
            self.nodes[index].value = value;
        }
        self.nodes
            .last()
            .map(|n| &n.value)
            .ok_or(AutodiffError::EmptyGraph)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::MatMul(a, b))
    }

    /// `a + 1 * bias` where `bias` is a `1 x cols` row.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::AddRowBias(a, bias))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.record(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.record(Op::AddScalar(a, c))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::Log(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::Softplus(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::Square(a))
    }

    /// `max(a, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> Result<NodeId, AutodiffError> {
        self.record(Op::ClampMin(a, floor))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::Mean(a))
    }

    /// Columns `start..end`.
    pub fn slice_cols(
        &mut self,
        a: NodeId,
        start: usize,
        end: usize,
    ) -> Result<NodeId, AutodiffError> {
        self.record(Op::SliceCols(a, start, end))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::ConcatCols(a, b))
    }

    /// Running sum along each row.
    pub fn cumsum_cols(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::CumsumCols(a))
    }

    pub fn custom(
        &mut self,
        op: Arc<dyn CustomOp>,
        inputs: &[NodeId],
    ) -> Result<NodeId, AutodiffError> {
        self.record(Op::Custom(op, inputs.to_vec()))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, AutodiffError> {
        let root_node = self
            .nodes
            .get(root.0)
            .ok_or(AutodiffError::UnknownNode(root.0))?;
        if root_node.value.shape() != [1, 1] {
            return Err(AutodiffError::NonScalarRoot(root_node.value.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for index in (0..=root.0).rev() {
            let Some(grad) = grads[index].take() else {
                continue;
            };
            let node = &self.nodes[index];
            if node.requires_grad {
                for (input, g) in self.local_grads(node, &grad) {
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    match &mut grads[input.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[index] = Some(grad);
        }

        let mut params = BTreeMap::new();
        for (index, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if let Some(id) = &node.param {
                let g = grads[index]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()));
                match params.get_mut(id) {
                    Some(acc) => Tensor::add_assign(acc, &g),
                    None => {
                        params.insert(id.clone(), g);
                    }
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn local_grads(&self, node: &Node, grad: &Tensor) -> Vec<(NodeId, Tensor)> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, grad.clone()), (*b, grad.clone())],
            Op::Sub(a, b) => vec![(*a, grad.clone()), (*b, grad.map(|g| -g))],
            Op::Mul(a, b) => vec![
                (*a, grad.zip_map(v(b), |g, y| g * y)),
                (*b, grad.zip_map(v(a), |g, x| g * x)),
            ],
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    out.push((*a, grad.gemm(false, v(b), true)));
                }
                if self.nodes[b.0].requires_grad {
                    out.push((*b, v(a).gemm(true, grad, false)));
                }
                out
            }
            Op::AddRowBias(a, b) => {
                let cols = grad.cols();
                let mut bias = vec![0.0; cols];
                if cols > 0 {
                    for row in grad.data().chunks(cols) {
                        for (acc, g) in bias.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                }
                vec![(*a, grad.clone()), (*b, Tensor::row(&bias))]
            }
            Op::Neg(a) => vec![(*a, grad.map(|g| -g))],
            Op::Scale(a, c) => vec![(*a, grad.map(|g| g * c))],
            Op::AddScalar(a, _) => vec![(*a, grad.clone())],
            Op::Exp(a) => vec![(*a, grad.zip_map(out, |g, y| g * y))],
            Op::Log(a) => vec![(*a, grad.zip_map(v(a), |g, x| g / x))],
            Op::Tanh(a) => vec![(*a, grad.zip_map(out, |g, y| g * (1.0 - y * y)))],
            Op::Relu(a) => vec![(*a, grad.zip_map(v(a), |g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::Sigmoid(a) => vec![(*a, grad.zip_map(out, |g, y| g * y * (1.0 - y)))],
            Op::Softplus(a) => vec![(*a, grad.zip_map(v(a), |g, x| g * sigmoid(x)))],
            Op::Square(a) => vec![(*a, grad.zip_map(v(a), |g, x| 2.0 * g * x))],
            Op::ClampMin(a, floor) => vec![(
                *a,
                grad.zip_map(v(a), |g, x| if x > *floor { g } else { 0.0 }),
            )],
            Op::Sum(a) => {
                let x = v(a);
                vec![(*a, Tensor::full(x.rows(), x.cols(), grad.data()[0]))]
            }
            Op::Mean(a) => {
                let x = v(a);
                let g = grad.data()[0] / x.len() as f64;
                vec![(*a, Tensor::full(x.rows(), x.cols(), g))]
            }
            Op::SliceCols(a, start, end) => {
                let x = v(a);
                let mut g = Tensor::zeros(x.rows(), x.cols());
                let width = end - start;
                let cols = x.cols();
                for r in 0..x.rows() {
                    let dst = &mut g.data_mut()[r * cols + start..r * cols + end];
                    dst.copy_from_slice(&grad.data()[r * width..(r + 1) * width]);
                }
                vec![(*a, g)]
            }
            Op::ConcatCols(a, b) => {
                let (x, y) = (v(a), v(b));
                let (ca, cb) = (x.cols(), y.cols());
                let mut ga = Vec::with_capacity(x.len());
                let mut gb = Vec::with_capacity(y.len());
                for r in 0..x.rows() {
                    let row = grad.row_slice(r);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..ca + cb]);
                }
                vec![
                    (
                        *a,
                        Tensor::new(x.rows(), ca, ga).expect("concat grad shape"),
                    ),
                    (
                        *b,
                        Tensor::new(y.rows(), cb, gb).expect("concat grad shape"),
                    ),
                ]
            }
            Op::CumsumCols(a) => {
                let mut g = grad.clone();
                let cols = g.cols();
                if cols > 0 {
                    for row in g.data_mut().chunks_mut(cols) {
                        for j in (0..row.len().saturating_sub(1)).rev() {
                            row[j] += row[j + 1];
                        }
                    }
                }
                vec![(*a, g)]
            }
            Op::Custom(custom, ins) => {
                let inputs: Vec<&Tensor> = ins.iter().map(v).collect();
                ins.iter()
                    .copied()
                    .zip(custom.backward(&inputs, out, grad))
                    .collect()
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of any node that lies upstream of the root and requires grad.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: &str) -> Option<&Tensor> {
        self.params.get(id)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_tanh_tracks_libm() {
        let mut x = -40.0;
        while x < 40.0 {
            assert!((tanh(x) - x.tanh()).abs() < 4e-16, "{x}");
            x += 1.37e-3;
        }
        for x in [1e-300, -1e-12, 4.9e-3, 5e-3, -5.1e-3] {
            assert!((tanh(x) - x.tanh()).abs() <= 5e-14 * x.abs(), "{x}");
        }
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(tanh(800.0), 1.0);
    }

    fn scalar_graph(x: f64) -> (Graph, NodeId) {
        let mut g = Graph::new();
        let id = g.variable(Tensor::scalar(x));
        (g, id)
    }

    #[test]
    fn square_value_and_gradient() {
        let (mut g, x) = scalar_graph(3.0);
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.value(y).item(), Some(9.0));
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn softplus_and_sigmoid_at_zero() {
        let (mut g, x) = scalar_graph(0.0);
        let sp = g.softplus(x).unwrap();
        assert!((g.value(sp).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let grads = g.backward(sp).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), Some(0.5));

        let (mut g, x) = scalar_graph(0.0);
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).item(), Some(0.5));
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), Some(0.25));
    }

    #[test]
    fn softplus_is_stable_for_large_arguments() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!(sigmoid(-1000.0).is_finite() && sigmoid(1000.0) == 1.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(2, 1));
        let y = g.exp(x).unwrap();
        assert!(matches!(
            g.backward(y),
            Err(AutodiffError::NonScalarRoot([2, 1]))
        ));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 2));
        match g.add(a, b) {
            Err(AutodiffError::ShapeMismatch { node, op, .. }) => {
                assert_eq!(node, Some(2));
                assert_eq!(op, "add");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn forward_recomputes_after_leaf_update() {
        let (mut g, x) = scalar_graph(3.0);
        let y = g.mul(x, x).unwrap();
        g.set_value(x, Tensor::scalar(4.0)).unwrap();
        assert_eq!(g.forward().unwrap().item(), Some(16.0));
        assert_eq!(g.value(y).item(), Some(16.0));
        assert!(g.set_value(y, Tensor::scalar(1.0)).is_err());
        assert!(g.set_value(x, Tensor::zeros(2, 1)).is_err());
    }

    #[test]
    fn parameter_gradients_accumulate_across_uses() {
        let p = Parameter::new("w", Tensor::scalar(2.0));
        let mut g = Graph::new();
        let a = g.parameter(&p);
        let b = g.parameter(&p);
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param("w").unwrap().item(), Some(4.0));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.variable(Tensor::scalar(5.0));
        let y = g.mul(c, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().item(), Some(2.0));
    }

    #[test]
    fn cumsum_and_slices() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::row(&[1.0, 2.0, 3.0]));
        let c = g.cumsum_cols(x).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 6.0]);
        let tail = g.slice_cols(c, 1, 3).unwrap();
        let s = g.sum(tail).unwrap();
        let grads = g.backward(s).unwrap();
        // d/dx_j of (c_1 + c_2) = number of retained partial sums containing x_j
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 1.0]);
        assert!(g.slice_cols(x, 2, 2).is_err());
        assert!(g.slice_cols(x, 0, 4).is_err());
    }
}
