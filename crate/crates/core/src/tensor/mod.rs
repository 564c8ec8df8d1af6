//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap reference-counted handle. Operations that involve at
//! least one input with `requires_grad` record a backward node holding the
//! parent handles and a closure mapping the output gradient to parent
//! gradients. Every tensor receives a creation index from a thread-local
//! counter; parents are always created before children, so descending creation
//! index is a topological order of the graph and backward accumulation is
//! bit-deterministic.

mod checkpoint;
mod nn;
mod ops;
mod optim;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Record, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use nn::{batch_norm, linear, BatchNormParams, LinearParams};
pub(crate) use ops::sigmoid;
pub use optim::{adam_step, AdamState};

use crate::error::{contract_err, dim_err, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Maps the gradient of an operation's output to one optional gradient per parent.
pub type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    op: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    node: Option<Node>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("op", &self.op_name())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            node,
        }))
    }

    /// Leaf tensor without gradient tracking.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, data, false)
    }

    /// Leaf tensor with explicit gradient tracking.
    pub fn leaf(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!("shape {:?} holds {} elements but {} values were given", shape, n, data.len()));
        }
        Ok(Self::build(shape.to_vec(), data, requires_grad, None))
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![0.0; n], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![value; n], false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![], vec![value], false, None)
    }

    /// Output of a differentiable operation.
    ///
    /// The backward node is only recorded when some parent requires grad; the
    /// closure receives the output gradient and must return one entry per
    /// parent, in order, each `None` or a vector of the parent's length.
    pub fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        op: &'static str,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then(|| Node { op, parents, backward: Box::new(backward) });
        Self::build(shape, data, requires_grad, node)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.borrow().len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Name of the operation that produced this tensor, or `"leaf"`.
    pub fn op_name(&self) -> &'static str {
        self.0.node.as_ref().map_or("leaf", |n| n.op)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Mutable access for optimizers and perturbation-based checks.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on a tensor with {} elements", d.len());
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Copy of the value with no graph linkage.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.to_vec(), false, None)
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar.
    ///
    /// Gradients are added to the `grad` slot of every reachable tensor that
    /// requires grad. Calling this twice without [`Tensor::zero_grad`] sums the
    /// two contributions.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return contract_err(format!("backward needs a scalar loss, got shape {:?}", self.shape()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Collect the reachable subgraph that carries gradient.
        let mut nodes: HashMap<u64, Tensor> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if nodes.contains_key(&t.id()) {
                continue;
            }
            if let Some(node) = &t.0.node {
                stack.extend(node.parents.iter().filter(|p| p.requires_grad()).cloned());
            }
            nodes.insert(t.id(), t);
        }
        let mut order: Vec<u64> = nodes.keys().copied().collect();
        order.sort_unstable_by(|a, b| b.cmp(a));

        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for id in order {
            let t = &nodes[&id];
            let Some(g) = pending.remove(&id) else {
                continue;
            };
            if let Some(node) = &t.0.node {
                let parent_grads = (node.backward)(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel(), "op {} parent grad length", node.op);
                    match pending.get_mut(&p.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(p.id(), pg);
                        }
                    }
                }
            }
            t.accumulate_grad(&g);
        }
        Ok(())
    }
}

/// Row count and row width when viewing a tensor as `[rows, last_dim]`.
pub(crate) fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&last, lead)) => (lead.iter().product(), last),
        None => (1, 1),
    }
}
