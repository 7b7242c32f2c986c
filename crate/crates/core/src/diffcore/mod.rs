//! Reverse-mode differentiation over small matrix-valued computation graphs.
//!
//! A [`Tape`] records nodes in creation order, which is also a topological
//! order. Values live in 64-bit dense matrices; scalars are `1×1`, column
//! vectors `n×1`. Broadcasting is never implicit: use [`Tape::broadcast`] and
//! [`Tape::sum_to`].
//!
//! Besides the numeric [`Tape::backward`] sweep, [`Tape::gradient_as_node`]
//! emits the gradient as ordinary graph nodes, so the result can be
//! differentiated again. The gradient-penalty term of the critic is built
//! that way.

mod backward;

use std::collections::HashMap;
use std::fmt;

use ndarray::{Array2, Axis, Zip};
use thiserror::Error;

pub use backward::Gradients;

/// `(rows, cols)`.
pub type Shape = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch at {op} (node {node}): {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        node: NodeId,
        left: Shape,
        right: Shape,
    },
    #[error("node {0} is an input or parameter without a binding")]
    Unbound(NodeId),
    #[error("binding for node {node} has shape {got:?}, expected {expected:?}")]
    BindingShape {
        node: NodeId,
        expected: Shape,
        got: Shape,
    },
    #[error("node {0} is not a scalar")]
    NotScalar(NodeId),
    #[error("node {0} has no value; run forward first")]
    NotEvaluated(NodeId),
    #[error("node {0} does not belong to this tape")]
    UnknownNode(NodeId),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Operation kinds. The set is closed: every op has a first-order rule that
/// is itself expressed with ops from this set, which is what makes
/// higher-order differentiation work.
#[derive(Debug, Clone)]
pub enum Op {
    Input,
    Parameter,
    Constant(Array2<f64>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    /// Heaviside step, `x > 0`. Derivative of relu; its own derivative is 0.
    Step(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    /// Sum down to `(1,c)`, `(r,1)` or `(1,1)`; the target is the node shape.
    SumTo(NodeId),
    /// Inverse of [`Op::SumTo`]: replicate rows, columns or a scalar.
    Broadcast(NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Parameter => "parameter",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Relu(_) => "relu",
            Op::Step(_) => "step",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::SumTo(_) => "sum",
            Op::Broadcast(_) => "broadcast",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Input | Op::Parameter | Op::Constant(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Step(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::SumTo(a)
            | Op::Broadcast(a) => vec![a],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub shape: Shape,
}

/// Values for the input and parameter nodes of a tape.
#[derive(Debug, Default, Clone)]
pub struct Bindings {
    values: HashMap<NodeId, Array2<f64>>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, node: NodeId, value: Array2<f64>) -> &mut Self {
        self.values.insert(node, value);
        self
    }

    pub fn get(&self, node: NodeId) -> Option<&Array2<f64>> {
        self.values.get(&node)
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Option<Array2<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(GraphError::UnknownNode(id))
    }

    pub fn shape(&self, id: NodeId) -> Result<Shape> {
        Ok(self.node(id)?.shape)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    fn push(&mut self, op: Op, shape: Shape) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, shape });
        self.values.push(None);
        id
    }

    pub fn input(&mut self, shape: Shape) -> NodeId {
        self.push(Op::Input, shape)
    }

    pub fn parameter(&mut self, shape: Shape) -> NodeId {
        self.push(Op::Parameter, shape)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        let shape = value.dim();
        self.push(Op::Constant(value), shape)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), value))
    }

    fn same_shape(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a)?, self.shape(b)?);
        if sa != sb {
            return Err(GraphError::ShapeMismatch {
                op: op.name(),
                node: NodeId(self.nodes.len()),
                left: sa,
                right: sb,
            });
        }
        Ok(self.push(op, sa))
    }

    fn unary(&mut self, op: Op, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a)?;
        Ok(self.push(op, s))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(Op::Add(a, b), a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(Op::Sub(a, b), a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(Op::Mul(a, b), a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(Op::Div(a, b), a, b)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.unary(Op::Scale(a, factor), a)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a)?, self.shape(b)?);
        if sa.1 != sb.0 {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                node: NodeId(self.nodes.len()),
                left: sa,
                right: sb,
            });
        }
        Ok(self.push(Op::MatMul(a, b), (sa.0, sb.1)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a)?;
        Ok(self.push(Op::Transpose(a), (c, r)))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Relu(a), a)
    }

    pub fn step(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Step(a), a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sigmoid(a), a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Log(a), a)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Square(a), a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sqrt(a), a)
    }

    /// Reduces `a` to `target`, which must be `(1,c)`, `(r,1)` or `(1,1)`
    /// for an `(r,c)` input. Reducing to the same shape is a no-op.
    pub fn sum_to(&mut self, a: NodeId, target: Shape) -> Result<NodeId> {
        let s = self.shape(a)?;
        if s == target {
            return Ok(a);
        }
        if !reducible(s, target) {
            return Err(GraphError::ShapeMismatch {
                op: "sum",
                node: NodeId(self.nodes.len()),
                left: s,
                right: target,
            });
        }
        Ok(self.push(Op::SumTo(a), target))
    }

    /// Sum of all entries as a `1×1` node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.sum_to(a, (1, 1))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a)?;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / (r * c) as f64)
    }

    pub fn broadcast(&mut self, a: NodeId, target: Shape) -> Result<NodeId> {
        let s = self.shape(a)?;
        if s == target {
            return Ok(a);
        }
        if !reducible(target, s) {
            return Err(GraphError::ShapeMismatch {
                op: "broadcast",
                node: NodeId(self.nodes.len()),
                left: s,
                right: target,
            });
        }
        Ok(self.push(Op::Broadcast(a), target))
    }

    pub fn value(&self, id: NodeId) -> Result<&Array2<f64>> {
        self.values
            .get(id.0)
            .ok_or(GraphError::UnknownNode(id))?
            .as_ref()
            .ok_or(GraphError::NotEvaluated(id))
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id)?;
        if v.dim() != (1, 1) {
            return Err(GraphError::NotScalar(id));
        }
        Ok(v[[0, 0]])
    }

    /// Evaluates every node in tape order. Inputs and parameters take their
    /// values from `bindings`.
    pub fn forward(&mut self, bindings: &Bindings) -> Result<()> {
        for i in 0..self.nodes.len() {
            let id = NodeId(i);
            let value = match &self.nodes[i].op {
                Op::Input | Op::Parameter => {
                    let v = bindings.get(id).ok_or(GraphError::Unbound(id))?;
                    if v.dim() != self.nodes[i].shape {
                        return Err(GraphError::BindingShape {
                            node: id,
                            expected: self.nodes[i].shape,
                            got: v.dim(),
                        });
                    }
                    v.clone()
                }
                op => self.eval(op, self.nodes[i].shape),
            };
            self.values[i] = Some(value);
        }
        Ok(())
    }

    fn val(&self, id: NodeId) -> &Array2<f64> {
        self.values[id.0]
            .as_ref()
            .expect("parents are evaluated before children")
    }

    fn eval(&self, op: &Op, shape: Shape) -> Array2<f64> {
        match *op {
            Op::Input | Op::Parameter => unreachable!("leaves are bound, not evaluated"),
            Op::Constant(ref v) => v.clone(),
            Op::Add(a, b) => self.val(a) + self.val(b),
            Op::Sub(a, b) => self.val(a) - self.val(b),
            Op::Mul(a, b) => self.val(a) * self.val(b),
            Op::Div(a, b) => self.val(a) / self.val(b),
            Op::Scale(a, k) => self.val(a) * k,
            Op::MatMul(a, b) => self.val(a).dot(self.val(b)),
            Op::Transpose(a) => self.val(a).t().to_owned(),
            Op::Relu(a) => self.val(a).mapv(|x| x.max(0.0)),
            Op::Step(a) => self.val(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Sigmoid(a) => self.val(a).mapv(sigmoid),
            Op::Log(a) => self.val(a).mapv(f64::ln),
            Op::Square(a) => self.val(a).mapv(|x| x * x),
            Op::Sqrt(a) => self.val(a).mapv(f64::sqrt),
            Op::SumTo(a) => sum_to(self.val(a), shape),
            Op::Broadcast(a) => broadcast(self.val(a), shape),
        }
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn reducible(from: Shape, to: Shape) -> bool {
    (to.0 == 1 || to.0 == from.0) && (to.1 == 1 || to.1 == from.1)
}

pub(crate) fn sum_to(v: &Array2<f64>, target: Shape) -> Array2<f64> {
    let (r, c) = v.dim();
    match (target.0 == r, target.1 == c) {
        (true, true) => v.clone(),
        (false, true) => v.sum_axis(Axis(0)).insert_axis(Axis(0)),
        (true, false) => v.sum_axis(Axis(1)).insert_axis(Axis(1)),
        (false, false) => Array2::from_elem((1, 1), v.sum()),
    }
}

pub(crate) fn broadcast(v: &Array2<f64>, target: Shape) -> Array2<f64> {
    if v.dim() == target {
        return v.clone();
    }
    let mut out = Array2::zeros(target);
    Zip::from(&mut out)
        .and_broadcast(v)
        .for_each(|o, &x| *o = x);
    out
}
