//! Tape-based compute graph. Nodes are appended in evaluation order, so the
//! insertion order is already a topological order and backward is a single
//! reverse sweep.

use crate::error::{Result, TensorError};
use crate::primitive::{Attrs, Primitive, LAYERNORM_EPS};
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Op {
    primitive: Primitive,
    inputs: Vec<Var>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Option<Op>,
    aux: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            aux: Vec::new(),
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a node; `None` until a backward pass has run
    /// or when the node does not require grad.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    pub fn apply(&mut self, primitive: Primitive, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, aux) = primitive.forward(&values)?;
        if !value.is_finite() {
            return Err(TensorError::NonFinite(primitive.name()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = requires_grad.then(|| Op {
            primitive,
            inputs: inputs.to_vec(),
        });
        self.nodes.push(Node {
            value,
            op,
            aux: if requires_grad { aux } else { Vec::new() },
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn apply_named(&mut self, name: &str, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let p = Primitive::from_name(name, attrs)?;
        self.apply(p, inputs)
    }

    /// Reverse sweep from a single-element root. Gradients accumulate into
    /// every grad-requiring node; nodes the root does not depend on receive
    /// zeros.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.nodes[root.0].value.shape();
        if self.nodes[root.0].value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(shape.to_vec()));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            adj[root.0] = Some(vec![T::one()]);
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor<T>> = op.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let grads = op.primitive.backward(&inputs, &node.value, &node.aux, &g);
                for (v, gi) in op.inputs.iter().zip(grads) {
                    if !self.nodes[v.0].requires_grad {
                        continue;
                    }
                    match &mut adj[v.0] {
                        Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a = *a + b),
                        slot => *slot = Some(gi),
                    }
                }
            }
            adj[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if !node.requires_grad {
                continue;
            }
            let acc = node.grad.get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
            if let Some(Some(g)) = adj.get(idx) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(TensorError::NonFinite("backward"));
                }
                acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
            }
        }
        Ok(())
    }

    // Typed shorthands.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MulElementwise, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Primitive::ScalarMul(s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Primitive::ScalarAdd(s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Neg, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Abs, &[a])
    }

    pub fn clamp(&mut self, a: Var, min: f64, max: f64) -> Result<Var> {
        self.apply(Primitive::Clamp { min, max }, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SoftmaxLastdim, &[a])
    }

    pub fn layernorm(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::LayerNormLastdim { eps: LAYERNORM_EPS }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::ReduceSum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::ReduceMean, &[a])
    }

    pub fn sum_lastdim(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SumLastdim, &[a])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::ConcatLastdim, parts)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Transpose2d, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[a])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.apply(Primitive::BroadcastAddRow, &[a, row])
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.apply(Primitive::BroadcastMulRow, &[a, row])
    }

    pub fn straight_through(&mut self, a: Var, threshold: f64) -> Result<Var> {
        self.apply(Primitive::StraightThrough { threshold }, &[a])
    }
}
