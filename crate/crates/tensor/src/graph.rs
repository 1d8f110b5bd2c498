//! Recorded computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape: every op pushes a node whose inputs already exist, so
//! node order is a topological order. [`Var`] is a cheap handle into one graph.

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Result, TensorError};
use crate::kernels::ConvGeom;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    pub(crate) id: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul(usize, usize),
    Bmm {
        a: usize,
        b: usize,
        transpose_b: bool,
    },
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        c_out: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        invstd: Vec<T>,
        train: bool,
    },
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize, T),
    Sqrt(usize),
    Softmax {
        a: usize,
        axis: usize,
        tau: T,
    },
    LogSoftmax {
        a: usize,
        axis: usize,
        tau: T,
    },
    Sum(usize),
    SumAxis(usize, usize),
    MaxAxis {
        a: usize,
        argmax: Vec<usize>,
    },
    MaxPool2d {
        a: usize,
        argmax: Vec<usize>,
    },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
}

impl<T> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Bmm { a, b, .. } => vec![*a, *b],
            Conv2d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias);
                v
            }
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Scale(a, _)
            | AddScalar(a)
            | Relu(a)
            | Gelu(a)
            | Sigmoid(a)
            | Exp(a)
            | Ln(a, _)
            | Sqrt(a)
            | Sum(a)
            | SumAxis(a, _)
            | Reshape(a)
            | Permute(a, _) => vec![*a],
            Softmax { a, .. } | LogSoftmax { a, .. } | MaxAxis { a, .. } | MaxPool2d { a, .. } => {
                vec![*a]
            }
            Concat(v, _) => v.clone(),
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Rc<Tensor<T>>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    pub(crate) name: &'static str,
}

/// Single-threaded tape of tensor operations.
pub struct Graph<T: Scalar> {
    uid: u32,
    grad_enabled: bool,
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
    flops: Cell<u64>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records gradients for leaves that request them.
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// A graph for inference: every node is treated as a constant and `backward` is refused.
    pub fn no_grad() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Self {
            uid: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            grad_enabled,
            nodes: RefCell::new(Vec::new()),
            flops: Cell::new(0),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Nominal count of scalar arithmetic operations performed so far.
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    pub(crate) fn add_flops(&self, n: usize) {
        self.flops.set(self.flops.get() + n as u64);
    }

    /// Leaf node. `requires_grad` is ignored in a no-grad graph.
    pub fn leaf(&self, tensor: Tensor<T>, requires_grad: bool) -> Result<Var> {
        tensor.ensure_finite("leaf")?;
        let rg = requires_grad && self.grad_enabled;
        Ok(self.push(tensor, Op::Leaf, rg, "leaf"))
    }

    /// Leaf that never receives gradients.
    pub fn constant(&self, tensor: Tensor<T>) -> Result<Var> {
        self.leaf(tensor, false)
    }

    /// Leaf that receives gradients (if the graph records them).
    pub fn variable(&self, tensor: Tensor<T>) -> Result<Var> {
        self.leaf(tensor, true)
    }

    /// Leaf honouring the tensor's own `requires_grad` flag.
    pub fn param(&self, tensor: &Tensor<T>) -> Result<Var> {
        let mut t = Tensor::new(tensor.shape(), tensor.data().to_vec())?;
        t.set_requires_grad(tensor.requires_grad());
        let rg = tensor.requires_grad();
        self.leaf(t, rg)
    }

    /// Constant copy of `v`'s value, cutting the gradient path.
    pub fn detach(&self, v: Var) -> Result<Var> {
        let value = self.value(v)?;
        Ok(self.push_rc(value, Op::Leaf, false, "detach"))
    }

    pub fn value(&self, v: Var) -> Result<Rc<Tensor<T>>> {
        self.check(v)?;
        Ok(self.nodes.borrow()[v.id].value.clone())
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        Ok(self.value(v)?.shape().to_vec())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        self.check(v)?;
        Ok(self.nodes.borrow()[v.id].requires_grad)
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.uid {
            return Err(TensorError::Graph("variable belongs to another graph".into()));
        }
        if v.id >= self.nodes.borrow().len() {
            return Err(TensorError::Graph(format!("unknown node {}", v.id)));
        }
        Ok(())
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, rg: bool, name: &'static str) -> Var {
        self.push_rc(Rc::new(value), op, rg, name)
    }

    fn push_rc(&self, value: Rc<Tensor<T>>, op: Op<T>, rg: bool, name: &'static str) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad: rg,
            name,
        });
        Var {
            graph: self.uid,
            id: nodes.len() - 1,
        }
    }

    /// Records a derived node after checking its value is finite.
    pub(crate) fn record(&self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let rg = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push(value, op, rg, name))
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate additively over every path.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        if !self.grad_enabled {
            return Err(TensorError::Contract("backward called on a no-grad graph".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let inputs = node.op.inputs();
            if let Some(&bad) = inputs.iter().find(|&&i| i >= id) {
                return Err(TensorError::Graph(format!(
                    "node {id} ({}) depends on later node {bad}: cycle",
                    node.name
                )));
            }
            if !node.requires_grad || inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let wants: Vec<bool> = inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let contribs = crate::ops::backward_op(&nodes, id, &g, &wants)?;
            for ((input, contrib), want) in inputs.iter().zip(contribs).zip(wants) {
                let Some(c) = contrib else { continue };
                if !want {
                    continue;
                }
                match &mut grads[*input] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(c),
                }
            }
            grads[id] = Some(g);
        }
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(TensorError::NonFinite { op: nodes[id].name });
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            graph: self.uid,
            grads,
            shapes,
        })
    }
}

/// Result of [`Graph::backward`]: `∂loss/∂node` for every node on a gradient path.
pub struct Gradients<T> {
    graph: u32,
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.id)?.as_deref()
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.get(v)?;
        Tensor::new(&self.shapes[v.id], g.to_vec()).ok()
    }
}
