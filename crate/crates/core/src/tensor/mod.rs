//! Dense `f32` tensors with tape-free reverse-mode differentiation.
//!
//! Every op result that depends on a tensor requiring gradients carries a
//! graph node holding its parents and a backward closure. Calling
//! [`Tensor::backward`] on a scalar walks the graph in reverse topological
//! order and accumulates total derivatives into the leaves. Inside
//! [`no_grad`] (inference mode) no nodes are allocated at all.
//!
//! Tensors are immutable after construction except for their gradient
//! buffer. Parameters are updated in place only when exclusively owned,
//! i.e. after the graph that referenced them has been dropped.

mod adam;
mod kernels;
mod mask;
mod ops;
mod params;

pub use adam::{Adam, AdamState};
pub use kernels::{parallel_enabled, set_parallel};
pub use mask::Mask;
pub use params::{ParamId, ParamStore};

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Identifier of a node in the differentiation graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u64);

static NEXT_NODE: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NODES_ALLOCATED: Cell<u64> = const { Cell::new(0) };
}

fn fresh_node_id() -> NodeId {
    NODES_ALLOCATED.with(|c| c.set(c.get() + 1));
    NodeId(NEXT_NODE.fetch_add(1, Ordering::Relaxed))
}

/// Number of graph nodes allocated on the current thread so far.
pub fn graph_nodes_allocated() -> u64 {
    NODES_ALLOCATED.with(|c| c.get())
}

/// Whether ops on the current thread record graph nodes.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Runs `f` in inference mode: no graph nodes are created inside.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = InferenceGuard::new();
    f()
}

/// RAII guard that disables graph recording until dropped.
pub struct InferenceGuard {
    prev: bool,
}

impl InferenceGuard {
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|c| c.replace(false));
        InferenceGuard { prev }
    }
}

impl Default for InferenceGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for InferenceGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

/// Receives the output gradient and the output values, returns one gradient
/// per parent (`None` where the parent does not need one).
pub(crate) type BackwardFn =
    Box<dyn Fn(&[f32], &[f32]) -> Vec<Option<Vec<f32>>> + Send + Sync + 'static>;

struct Op {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: NodeId,
    // None for leaves.
    op: Option<Op>,
}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f32>,
    node: Option<Node>,
    grad: Mutex<Option<Vec<f32>>>,
}

/// Forward-pass mode. Controls stochastic layers only; graph recording is
/// governed separately by [`no_grad`].
pub enum Mode<'a> {
    Infer,
    Train(&'a mut dyn rand::RngCore),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape);
        if self.numel() <= 16 {
            s.field("data", &self.0.data);
        }
        s.field("requires_grad", &self.requires_grad()).finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f32>, node: Option<Node>) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Arc::new(Inner {
            shape,
            data,
            node,
            grad: Mutex::new(None),
        }))
    }

    /// Constant tensor (no graph node).
    pub fn new(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Tensor::build(shape.to_vec(), data, None))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::new(data, shape)?;
        Ok(t.into_leaf(true))
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::build(Vec::new(), vec![v], None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::build(shape.to_vec(), vec![0.0; numel_of(shape)], None)
    }

    pub fn full(shape: &[usize], v: f32) -> Tensor {
        Tensor::build(shape.to_vec(), vec![v; numel_of(shape)], None)
    }

    /// Constant filled with `N(0, std²)` samples.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Tensor {
        let data = (0..numel_of(shape))
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor::build(shape.to_vec(), data, None)
    }

    /// Same values, re-wrapped as a leaf with or without gradient tracking.
    pub fn into_leaf(self, requires_grad: bool) -> Tensor {
        let (shape, data) = match Arc::try_unwrap(self.0) {
            Ok(inner) => (inner.shape, inner.data),
            Err(shared) => (shared.shape.clone(), shared.data.clone()),
        };
        let node = requires_grad.then(|| Node {
            id: fresh_node_id(),
            op: None,
        });
        Tensor::build(shape, data, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.0.node.is_some()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.0.node.as_ref().map(|n| n.id)
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.as_ref().map_or(true, |n| n.op.is_none())
    }

    /// Name of the op that produced this tensor, if any.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref()?.op.as_ref().map(|o| o.name)
    }

    /// Accumulated gradient (leaves only).
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    /// Copy of the values cut out of the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.0.shape.clone(), self.0.data.clone(), None)
    }

    pub fn same_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Mutable access to the values, available only while no graph or
    /// other handle shares this tensor.
    pub fn data_mut(&mut self) -> Result<&mut [f32]> {
        match Arc::get_mut(&mut self.0) {
            Some(inner) => Ok(&mut inner.data),
            None => Err(Error::contract(
                "tensor is shared (a live graph still references it)",
            )),
        }
    }

    /// Result of an op: attaches a graph node only when recording is on and
    /// some parent needs gradients.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: &[&Tensor],
        backward: impl Fn(&[f32], &[f32]) -> Vec<Option<Vec<f32>>> + Send + Sync + 'static,
    ) -> Tensor {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let node = track.then(|| Node {
            id: fresh_node_id(),
            op: Some(Op {
                name,
                parents: parents.iter().map(|p| (*p).clone()).collect(),
                backward: Box::new(backward),
            }),
        });
        Tensor::build(shape, data, node)
    }

    /// Reverse-mode pass from a scalar loss. Leaf gradients accumulate across
    /// calls until [`Tensor::zero_grad`] (or [`ParamStore::zero_grad`]).
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if self.0.node.is_none() {
            return Err(Error::contract("backward() on a tensor with no graph"));
        }

        let order = self.topo_order();
        let mut grads: HashMap<NodeId, Vec<f32>> = HashMap::new();
        grads.insert(self.node_id().unwrap(), vec![1.0]);

        for t in order.iter().rev() {
            let node = t.0.node.as_ref().unwrap();
            let Some(g) = grads.remove(&node.id) else {
                continue;
            };
            match &node.op {
                None => {
                    let mut slot = t.0.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => add_into(acc, &g),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    let parent_grads = (op.backward)(&g, &t.0.data);
                    debug_assert_eq!(parent_grads.len(), op.parents.len(), "{}", op.name);
                    for (p, pg) in op.parents.iter().zip(parent_grads) {
                        let (Some(pn), Some(pg)) = (p.0.node.as_ref(), pg) else {
                            continue;
                        };
                        debug_assert_eq!(pg.len(), p.numel(), "grad size in {}", op.name);
                        match grads.get_mut(&pn.id) {
                            Some(acc) => add_into(acc, &pg),
                            None => {
                                grads.insert(pn.id, pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    // Post-order DFS over graph nodes; parents precede children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<NodeId> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let id = t.node_id().unwrap();
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.node.as_ref().unwrap().op {
                for p in op.parents.iter().rev() {
                    if let Some(pid) = p.node_id() {
                        if !visited.contains(&pid) {
                            stack.push((p.clone(), false));
                        }
                    }
                }
            }
        }
        order
    }
}

pub(crate) fn add_into(acc: &mut [f32], g: &[f32]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}
