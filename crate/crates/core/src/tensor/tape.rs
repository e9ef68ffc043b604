use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use super::param::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(super) usize);

pub(super) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Recorded operation together with whatever the backward pass needs.
pub(super) enum Op {
    Constant,
    Input,
    Param,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ScaleBy { x: usize, s: usize },
    AddBias { x: usize, bias: usize, axis: usize },
    MatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    Transpose { x: usize, rows: usize, cols: usize },
    Relu(usize),
    Sin(usize),
    Cos(usize),
    Sum(usize),
    Mean(usize),
    SumLast { x: usize, inner: usize },
    Dot(usize, usize),
    Reshape(usize),
    Concat { parts: Vec<usize>, axis: usize },
    IndexRows { x: usize, rows: Vec<usize> },
    Softmax(usize),
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
    L2Normalize { x: usize, norms: Vec<f64> },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    GroupNorm { x: usize, gamma: usize, beta: usize, groups: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    GlobalAvgPool(usize),
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    Shift { x: usize, dx: isize, dy: isize },
    ShiftSum { g: usize, heads: usize, window: usize, h: usize, w: usize },
    LocalAttention { q: usize, k: usize, v: usize, heads: usize, window: usize, weights: Vec<f64> },
}

impl Op {
    pub(super) fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Constant | Input | Param => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Dot(a, b) => vec![*a, *b],
            Scale(x, _) | Relu(x) | Sin(x) | Cos(x) | Sum(x) | Mean(x) | Reshape(x)
            | Softmax(x) | GlobalAvgPool(x) => vec![*x],
            ScaleBy { x, s } => vec![*x, *s],
            AddBias { x, bias, .. } => vec![*x, *bias],
            MatMul { a, b, .. } => vec![*a, *b],
            Transpose { x, .. } | SumLast { x, .. } | IndexRows { x, .. } | L2Normalize { x, .. } => {
                vec![*x]
            }
            Concat { parts, .. } => parts.clone(),
            CrossEntropy { logits, .. } => vec![*logits],
            LayerNorm { x, gamma, beta, .. } | GroupNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Conv2d { x, w, .. } => vec![*x, *w],
            Shift { x, .. } => vec![*x],
            ShiftSum { g, .. } => vec![*g],
            LocalAttention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Constant => "constant",
            Input => "input",
            Param => "param",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Scale(..) => "mul_scalar",
            ScaleBy { .. } => "scale_by",
            AddBias { .. } => "add_bias",
            MatMul { .. } => "matmul",
            Transpose { .. } => "transpose",
            Relu(_) => "relu",
            Sin(_) => "sin",
            Cos(_) => "cos",
            Sum(_) => "sum",
            Mean(_) => "mean",
            SumLast { .. } => "sum_last",
            Dot(..) => "dot",
            Reshape(_) => "reshape",
            Concat { .. } => "concat",
            IndexRows { .. } => "index_rows",
            Softmax(_) => "softmax",
            CrossEntropy { .. } => "cross_entropy",
            L2Normalize { .. } => "l2_normalize",
            LayerNorm { .. } => "layer_norm",
            GroupNorm { .. } => "group_norm",
            GlobalAvgPool(_) => "global_avg_pool",
            Conv2d { .. } => "conv2d",
            Shift { .. } => "shift",
            ShiftSum { .. } => "shift_sum",
            LocalAttention { .. } => "local_attention",
        }
    }
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
    /// Identity of the store parameters are read from.
    store: Option<u64>,
}

/// Records one forward pass for reverse-mode differentiation.
///
/// A tape built with [`Tape::no_grad`] records values only; nothing on it can
/// receive gradients.
pub struct Tape {
    inner: RefCell<Inner>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner::default()),
            grad_enabled: true,
        }
    }

    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that never receives gradients.
    pub fn constant(&self, t: Tensor) -> Var {
        let (shape, data) = (t.shape.clone(), t.data);
        self.push_leaf(shape, data, Op::Constant, false)
    }

    /// A leaf that receives gradients (when the tape records them).
    pub fn input(&self, t: Tensor) -> Var {
        let (shape, data) = (t.shape.clone(), t.data);
        let rg = self.grad_enabled;
        self.push_leaf(shape, data, Op::Input, rg)
    }

    /// Loads a parameter from `store`; repeated loads of the same id share a node.
    ///
    /// # Panics
    /// If the tape already read parameters from a different store.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        {
            let mut inner = self.inner.borrow_mut();
            match inner.store {
                Some(uid) => assert_eq!(uid, store.uid(), "a tape reads parameters from one store; use a separate tape per store"),
                None => inner.store = Some(store.uid()),
            }
            if let Some(&idx) = inner.params.get(&id) {
                return Var(idx);
            }
        }
        let t = store.get(id).tensor();
        let var = if self.grad_enabled {
            self.push_leaf(t.shape().to_vec(), t.data().to_vec(), Op::Param, true)
        } else {
            self.push_leaf(t.shape().to_vec(), t.data().to_vec(), Op::Constant, false)
        };
        self.inner.borrow_mut().params.insert(id, var.0);
        var
    }

    fn push_leaf(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(inner.nodes.len() - 1)
    }

    /// Appends a computed node. Non-finite outputs are rejected.
    pub(super) fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if let Some(bad) = value.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{} produced non-finite value {bad}", op.name())));
        }
        let mut inner = self.inner.borrow_mut();
        let requires_grad =
            self.grad_enabled && op.parents().iter().any(|&p| inner.nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        inner.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(inner.nodes.len() - 1))
    }

    pub(super) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        Ref::map(self.inner.borrow(), |i| &i.nodes)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes()[v.0].shape.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Tensor {
        let nodes = self.nodes();
        let n = &nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
        }
    }

    /// Borrowed view of a node's values.
    pub fn values(&self, v: Var) -> Ref<'_, [f64]> {
        Ref::map(self.nodes(), |n| n[v.0].value.as_slice())
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let nodes = self.nodes();
        let n = &nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::arg(format!("expected a scalar, got shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    /// Propagates d(loss)/d(node) back to every leaf that requires gradients.
    ///
    /// Each call starts from fresh intermediate gradients; accumulation across calls
    /// happens where the returned [`Grads`] are consumed (e.g. [`ParamStore::accumulate`]).
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let nodes = self.nodes();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        let mut leaves = HashMap::new();
        if root.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &nodes[idx].op {
                Op::Input | Op::Param => {
                    leaves.insert(idx, g);
                }
                Op::Constant => {}
                _ => super::ops::backward_node(&nodes, idx, &g, &mut grads),
            }
        }
        let params = self
            .inner
            .borrow()
            .params
            .iter()
            .filter_map(|(&id, &idx)| leaves.get(&idx).map(|_| (id, idx)))
            .collect();
        Ok(Grads { leaves, params })
    }
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug)]
pub struct Grads {
    leaves: HashMap<usize, Vec<f64>>,
    params: HashMap<ParamId, usize>,
}

impl Grads {
    /// Gradient for a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).and_then(|idx| self.leaves.get(idx)).map(Vec::as_slice)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

/// Adds `g` into the gradient slot of node `parent` when that node tracks gradients.
pub(super) fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    parent: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[parent].requires_grad {
        return;
    }
    let slot = grads[parent].get_or_insert_with(|| vec![0.0; nodes[parent].value.len()]);
    f(slot);
}
