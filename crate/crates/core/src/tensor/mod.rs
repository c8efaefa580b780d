//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Tensors are row-major dense arrays of a [`Scalar`] type. Every operator
//! records its parents and a backward closure; [`Tensor::backward`] replays
//! the tape in reverse creation order and accumulates gradients into every
//! reachable leaf created with `requires_grad`.
//!
//! Graphs are single-threaded (`Rc`-based). Operators may be called
//! concurrently on *disjoint* graphs; extracted values (`to_vec`) are plain
//! data and safe to move across threads.

mod conv;
mod elementwise;
mod gradcheck;
mod linalg;
mod sample;
mod spatial;

pub use gradcheck::{grad_check, GradReport};
pub(crate) use sample::bilinear_taps;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackwardFn<S> = Box<dyn Fn(&[S], &[Tensor<S>])>;

struct Node<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    /// Whether gradients flow through this node (leaf: `requires_grad`;
    /// internal: any parent tracked).
    track: bool,
    parents: Vec<Tensor<S>>,
    backward_fn: Option<BackwardFn<S>>,
}

/// Dense N-dimensional array with optional gradient tracking.
pub struct Tensor<S: Scalar> {
    node: Rc<Node<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, track={})",
            self.node.shape, self.node.track
        )
    }
}

impl<S: Scalar> Tensor<S> {
    fn new_leaf(shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                track: requires_grad,
                parents: Vec::new(),
                backward_fn: None,
            }),
        }
    }

    /// Build an operator output. `backward` receives the output gradient and
    /// the parents, and must accumulate into each parent via
    /// [`Tensor::add_grad`] / [`Tensor::with_grad_buffer`].
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        backward: impl Fn(&[S], &[Tensor<S>]) + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "operator produced a non-finite value"
        );
        let track = parents.iter().any(|p| p.node.track);
        let (parents, backward_fn): (Vec<_>, Option<BackwardFn<S>>) = if track {
            (parents, Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                track,
                parents,
                backward_fn,
            }),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self::new_leaf(shape.to_vec(), data, false))
    }

    /// Leaf that accumulates gradients (a trainable parameter or audit input).
    pub fn param_from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self::new_leaf(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new_leaf(shape.to_vec(), vec![S::zero(); shape.iter().product()], false)
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self::new_leaf(shape.to_vec(), vec![value; shape.iter().product()], false)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn scalar(value: S) -> Self {
        Self::new_leaf(vec![1], vec![value], false)
    }

    /// Uniform random leaf in [lo, hi).
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        Self::new_leaf(shape.to_vec(), rng.uniform_vec(n, lo, hi), false)
    }

    /// Copy of this tensor as a gradient-accumulating leaf.
    pub fn requiring_grad(&self) -> Self {
        Self::new_leaf(self.node.shape.clone(), self.to_vec(), true)
    }

    /// Copy of this tensor cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::new_leaf(self.node.shape.clone(), self.to_vec(), false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.node.data.borrow()[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.track
    }

    pub fn all_finite(&self) -> bool {
        self.node.data.borrow().iter().all(|v| v.is_finite())
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.node.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Replace the stored values (same shape). Used by optimizers and
    /// weight loading; never records an op.
    pub fn set_data(&self, data: Vec<S>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::dim(format!(
                "set_data: expected {} elements, got {}",
                self.numel(),
                data.len()
            )));
        }
        *self.node.data.borrow_mut() = data;
        Ok(())
    }

    /// Accumulate `contrib` into this node's gradient (no-op if untracked).
    pub(crate) fn add_grad(&self, contrib: &[S]) {
        if !self.node.track {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![S::zero(); self.numel()]);
        for (g, c) in buf.iter_mut().zip(contrib) {
            *g += *c;
        }
    }

    /// Accumulate into this node's gradient buffer in place.
    pub(crate) fn with_grad_buffer(&self, f: impl FnOnce(&mut [S])) {
        if !self.node.track {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![S::zero(); self.numel()]);
        f(buf);
    }

    /// Reverse-mode gradient of a scalar loss with respect to every
    /// reachable tracked leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.node.shape
            )));
        }
        if !self.node.track {
            return Ok(());
        }

        // Collect the tracked subgraph. Node ids increase monotonically with
        // creation, so descending id order is a valid reverse topological order.
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut order: Vec<Tensor<S>> = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.node.track || !visited.insert(t.node.id) {
                continue;
            }
            for p in &t.node.parents {
                stack.push(p.clone());
            }
            order.push(t);
        }
        order.sort_by(|a, b| b.node.id.cmp(&a.node.id));

        self.add_grad(&[S::one()]);
        for t in &order {
            let Some(back) = &t.node.backward_fn else {
                continue; // leaf
            };
            let slot = t.node.grad.borrow();
            let Some(g) = slot.as_ref() else {
                continue;
            };
            back(g, &t.node.parents);
        }
        Ok(())
    }
}

/// Row-major strides helper used by axiswise ops.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}
