//! Reverse-mode automatic differentiation over `f64` ndarray tensors.
//!
//! A [`Tape`] records every operation of one forward pass. `backward` then
//! sweeps the recorded nodes in reverse, handing each node's accumulated
//! output gradient to the closure that op registered. Gradients are only
//! propagated through nodes that have a differentiable leaf among their
//! ancestors, so constant subgraphs (e.g. a frozen embedding) cost nothing
//! at backward time.

mod conv;
mod ops;
mod pool;

pub use conv::conv2d_raw;

use ndarray::ArrayD;
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

/// Index of a node on the tape.
pub type TensorId = usize;

/// Lightweight handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub id: TensorId,
}

/// Gradient contributions flowing from a node to its parents.
type GradFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<(TensorId, ArrayD<f64>)>>;

struct Node {
    value: Rc<ArrayD<f64>>,
    grad_fn: Option<GradFn>,
    /// True when some ancestor is a differentiable leaf.
    needs_grad: bool,
}

/// Records one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Add a differentiable leaf (a parameter).
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(Rc::new(value), None, true)
    }

    /// Add a constant leaf; no gradient flows into it.
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.push(Rc::new(value), None, false)
    }

    /// Add a differentiable leaf from a shared array without copying.
    pub fn leaf_shared(&self, value: Rc<ArrayD<f64>>) -> Var {
        self.push(value, None, true)
    }

    /// Add a constant leaf from a shared array without copying.
    pub fn constant_shared(&self, value: Rc<ArrayD<f64>>) -> Var {
        self.push(value, None, false)
    }

    fn push(&self, value: Rc<ArrayD<f64>>, grad_fn: Option<GradFn>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad_fn,
            needs_grad,
        });
        Var {
            id: nodes.len() - 1,
        }
    }

    /// Register an op node. `parents` is only used to derive `needs_grad`;
    /// the closure itself routes gradients by id.
    pub(crate) fn op(&self, value: ArrayD<f64>, parents: &[Var], grad_fn: GradFn) -> Var {
        self.op_rc(Rc::new(value), parents, grad_fn)
    }

    /// Like [`Tape::op`] but takes an already shared value, so the grad
    /// closure can capture a handle to the node's own output.
    pub(crate) fn op_rc(&self, value: Rc<ArrayD<f64>>, parents: &[Var], grad_fn: GradFn) -> Var {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].needs_grad)
        };
        self.push(
            value,
            if needs_grad { Some(grad_fn) } else { None },
            needs_grad,
        )
    }

    /// Shared handle to a node's value.
    pub fn value(&self, v: Var) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.nodes.borrow()[v.id].value)
    }

    /// Clone a node's value into an owned array.
    pub fn value_owned(&self, v: Var) -> ArrayD<f64> {
        self.nodes.borrow()[v.id].value.as_ref().clone()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.id].needs_grad
    }

    /// Backpropagate from a scalar `root`, returning gradients for `wanted`.
    ///
    /// Nodes that no `wanted` id depends on transitively are still visited but
    /// their gradients are dropped as soon as their parents have been served.
    pub fn backward(&self, root: Var, wanted: &[Var]) -> HashMap<TensorId, ArrayD<f64>> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = Vec::new();
        grads.resize_with(root.id + 1, || None);
        grads[root.id] = Some(ArrayD::from_elem(nodes[root.id].value.shape(), 1.0));

        let mut out = HashMap::new();
        let wanted_ids: Vec<TensorId> = wanted.iter().map(|v| v.id).collect();
        for id in (0..=root.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            if nodes[id].needs_grad {
                if let Some(grad_fn) = &nodes[id].grad_fn {
                    for (pid, contrib) in grad_fn(&grad) {
                        debug_assert!(pid < id, "gradient edges must point backwards");
                        match &mut grads[pid] {
                            Some(acc) => *acc += &contrib,
                            slot @ None => *slot = Some(contrib),
                        }
                    }
                }
            }
            if wanted_ids.contains(&id) {
                out.insert(id, grad);
            }
        }
        out
    }
}
