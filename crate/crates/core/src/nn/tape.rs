//! Dynamic reverse-mode tape.
//!
//! Every op appends a node holding its output value and a pullback closure.
//! `backward` walks the nodes in reverse creation order, so the graph is a
//! DAG by construction. A tape is single-threaded; concurrent inference gives
//! each caller its own tape.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{DrfError, Result};
use crate::nn::tensor::{ParamId, ParamStore, Tensor};
use crate::par::Exec;

pub(crate) type Pullback = Box<dyn Fn(&[f64], &mut GradSink<'_>)>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    param: Option<ParamId>,
    pullback: Option<Pullback>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
    pub(crate) exec: Exec,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            exec: Exec::default(),
        }
    }

    /// A tape that records values only; `backward` yields no gradients.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
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

    fn push_node(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push_node(Node {
            value: Rc::new(t),
            requires_grad: false,
            param: None,
            pullback: None,
        })
    }

    /// Leaf whose gradient is tracked when `t.requires_grad` is set.
    pub fn leaf(&self, mut t: Tensor) -> Var {
        let rg = t.requires_grad && self.grad_enabled;
        t.grad = None;
        self.push_node(Node {
            value: Rc::new(t),
            requires_grad: rg,
            param: None,
            pullback: None,
        })
    }

    /// Record a model parameter as a gradient-tracked leaf.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        let p = &store.get(id).tensor;
        let t = Tensor {
            shape: p.shape.clone(),
            data: p.data.clone(),
            grad: None,
            requires_grad: true,
        };
        self.push_node(Node {
            value: Rc::new(t),
            requires_grad: self.grad_enabled,
            param: Some(id),
            pullback: None,
        })
    }

    pub(crate) fn push(&self, value: Tensor, parents: &[Var], pullback: Pullback) -> Var {
        let rg = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        self.push_node(Node {
            value: Rc::new(value),
            requires_grad: rg,
            param: None,
            pullback: if rg { Some(pullback) } else { None },
        })
    }

    /// Whether any of `parents` needs a gradient (lets ops skip saving state).
    pub(crate) fn any_requires_grad(&self, parents: &[Var]) -> bool {
        self.grad_enabled && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        }
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shape = &nodes[loss.0].value.shape;
        if nodes[loss.0].value.len() != 1 {
            return Err(DrfError::NonScalarLoss(shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients {
                grads,
                params: vec![],
            });
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(pb) = nodes[id].pullback.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let (lower, _) = grads.split_at_mut(id);
            let mut sink = GradSink {
                grads: lower,
                nodes: &nodes,
            };
            pb(&g, &mut sink);
        }
        let params = nodes[..=loss.0]
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Destination for gradients emitted by a pullback.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &'a [Node],
}

impl GradSink<'_> {
    /// Mutable gradient buffer for `v`, or `None` when `v` needs no gradient.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.len();
        Some(
            self.grads[v.0]
                .get_or_insert_with(|| vec![0.0; n])
                .as_mut_slice(),
        )
    }

    pub(crate) fn add(&mut self, v: Var, g: &[f64]) {
        if let Some(s) = self.slot(v) {
            for (a, b) in s.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of a leaf (or parameter) variable, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Add parameter gradients into the store's accumulators. Calling this
    /// twice without `zero_grad` accumulates.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(pid, node) in &self.params {
            if let Some(g) = self.grads[node].as_deref() {
                store.get_mut(pid).tensor.accumulate_grad(g);
            }
        }
    }
}
