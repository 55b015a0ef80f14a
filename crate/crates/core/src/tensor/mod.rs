//! Dense row-major N-D tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value. Operations on tensors that require
//! gradients record a node holding the parents and a backward closure; the
//! graph is implicit in those links and is linearised into a [`Graph`] when
//! [`Tensor::backward`] runs. Leaves created with [`Tensor::requires_grad`]
//! accumulate gradients across backward passes until [`Tensor::zero_grad`].

mod conv;
mod elementwise;
mod element;
mod linalg;
mod norm;
pub mod rng;
mod structural;

pub use conv::ConvSpec;
pub use element::{DType, Element};
pub use rng::SeedStream;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on the current thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Inputs handed to a backward closure.
pub struct BackwardCtx<'a, T: Element> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a [T],
    /// Forward output buffer of this node.
    pub out: &'a [T],
    pub parents: &'a [Tensor<T>],
}

/// Maps output gradient to one optional gradient per parent, in parent order.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T: Element> {
    op: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Element> {
    id: usize,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

pub struct Tensor<T: Element>(Arc<Inner<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape);
        if let Some(node) = &self.0.node {
            s.field("op", &node.op);
        }
        if self.numel() <= 16 {
            s.field("data", &self.0.data);
        }
        s.finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<T: Element> Tensor<T> {
    fn from_parts(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        if numel_of(shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Self::from_parts(data, shape.to_vec(), false, None))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| T::of(v)).collect(), shape)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![value], Vec::new(), false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_parts(vec![value; numel_of(shape)], shape.to_vec(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Normal samples with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut SeedStream) -> Self {
        let data = (0..numel_of(shape)).map(|_| T::of(std * rng.normal())).collect();
        Self::from_parts(data, shape.to_vec(), false, None)
    }

    /// Uniform samples on `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SeedStream) -> Self {
        let data = (0..numel_of(shape))
            .map(|_| T::of(lo + (hi - lo) * rng.uniform()))
            .collect();
        Self::from_parts(data, shape.to_vec(), false, None)
    }

    /// Returns a leaf copy of this tensor that accumulates gradients.
    pub fn requires_grad(&self) -> Self {
        Self::from_parts(self.0.data.clone(), self.0.shape.clone(), true, None)
    }

    /// Returns a leaf copy of this tensor that is cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    /// Builds the output of a graph operation. A node is recorded only when
    /// recording is enabled and some parent requires gradients.
    pub fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        op: &'static str,
        backward: BackwardFn<T>,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.is_tracked());
        let node = track.then(|| Node {
            op,
            parents,
            backward,
        });
        Self::from_parts(data, shape, track, node)
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.as_f64()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::shape(format!("item() on tensor of shape {:?}", self.shape())));
        }
        Ok(self.0.data[0])
    }

    /// Whether gradients flow into or through this tensor.
    pub fn is_tracked(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Tag of the operation that produced this tensor, if any.
    pub fn op(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    pub fn parents(&self) -> &[Tensor<T>] {
        self.0.node.as_ref().map(|n| n.parents.as_slice()).unwrap_or(&[])
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn grad_tensor(&self) -> Option<Tensor<T>> {
        self.grad()
            .map(|g| Self::from_parts(g, self.0.shape.clone(), false, None))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Back-propagates from this scalar, accumulating into every tracked leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        if !self.is_tracked() {
            return Ok(());
        }
        let graph = Graph::build(self);
        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);

        for t in graph.nodes.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            let Some(node) = &t.0.node else {
                t.accumulate_grad(&g);
                continue;
            };
            let ctx = BackwardCtx {
                grad: &g,
                out: &t.0.data,
                parents: &node.parents,
            };
            let parent_grads = (node.backward)(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.is_tracked() {
                    continue;
                }
                debug_assert_eq!(pg.len(), p.numel(), "op {} gradient size", node.op);
                match pending.get_mut(&p.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a = *a + b),
                    None => {
                        pending.insert(p.id(), pg);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Topologically ordered view of the tracked subgraph below a root.
pub struct Graph<T: Element> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Element> Graph<T> {
    /// Post-order DFS from `root`; every parent precedes its children.
    pub fn build(root: &Tensor<T>) -> Self {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.parents().iter().rev() {
                if p.is_tracked() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        Graph { nodes: order }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Tensor<T>] {
        &self.nodes
    }

    /// Operation tags in execution order; leaves appear as `"leaf"`.
    pub fn ops(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|t| t.op().unwrap_or("leaf")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_extent() {
        assert!(Tensor::<f64>::from_vec(vec![1.0; 5], &[2, 3]).is_err());
        assert!(Tensor::<f64>::from_vec(vec![], &[0]).is_err());
        let t = Tensor::<f64>::from_vec(vec![1.0; 6], &[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::<f64>::from_vec(vec![1.0, -2.0, 3.0], &[3]).unwrap().requires_grad();
        x.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_is_twice_input() {
        let x = Tensor::<f64>::from_vec(vec![1.0, -2.0, 3.0], &[3]).unwrap().requires_grad();
        x.mul(&x).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).unwrap().requires_grad();
        let loss = x.sum_all();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let x = Tensor::<f64>::ones(&[2]).requires_grad();
        assert!(x.scale(2.0).backward().is_err());
    }

    #[test]
    fn graph_is_topologically_ordered() {
        let x = Tensor::<f64>::ones(&[3]).requires_grad();
        let y = x.exp().mul(&x).unwrap();
        let z = y.add(&x.relu()).unwrap().sum_all();
        let g = Graph::build(&z);
        let pos: HashMap<usize, usize> = g.nodes().iter().enumerate().map(|(i, t)| (t.id(), i)).collect();
        for t in g.nodes() {
            for p in t.parents() {
                assert!(pos[&p.id()] < pos[&t.id()]);
            }
        }
        // every node exactly once
        assert_eq!(pos.len(), g.len());
        assert_eq!(*g.ops().last().unwrap(), "sum_all");
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::<f64>::ones(&[2]).requires_grad();
        let y = no_grad(|| x.exp());
        assert!(y.is_leaf());
        assert!(!y.is_tracked());
        assert!(grad_enabled());
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = SeedStream::new(3);
        let a = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng).requires_grad();
        let b = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng).requires_grad();
        let run = || {
            a.zero_grad();
            b.zero_grad();
            a.matmul(&b).unwrap().silu().softmax(1).unwrap().mul(&a.matmul(&b).unwrap()).unwrap().sum_all().backward().unwrap();
            (a.grad().unwrap(), b.grad().unwrap())
        };
        let first = run();
        let second = run();
        assert_eq!(first.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), second.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(first.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), second.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
