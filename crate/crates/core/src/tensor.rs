//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an ordered tape of executed primitive ops. Each op that
//! touches a tensor requiring gradients records one backward closure; calling
//! [`Graph::backward`] replays the tape once, in reverse, which visits each
//! op exactly once and leaves the adjoints in the leaves' `grad` buffers.
//!
//! Tensors are immutable once written by an op. A graph and the tensors it
//! references belong to one logical thread; distinct graphs are independent.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::elem::Elem;
use crate::error::{Result, TensorError};

struct Inner<E: Elem> {
    shape: Vec<usize>,
    data: RefCell<Rc<Vec<E>>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
}

/// A dense, row-major tensor. Cloning is cheap (reference-counted).
pub struct Tensor<E: Elem>(Rc<Inner<E>>);

impl<E: Elem> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<E: Elem> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(shape={:?}, requires_grad={})", self.shape(), self.requires_grad())
    }
}

impl<E: Elem> Tensor<E> {
    fn new(shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "shape does not match buffer length");
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(Rc::new(data)),
            grad: RefCell::new(None),
            requires_grad,
        }))
    }

    /// A leaf tensor that does not take gradients (inputs, constants).
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Self {
        Tensor::new(shape.into(), data, false)
    }

    /// A trainable leaf: gradients accumulate here during backward.
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Self {
        Tensor::new(shape.into(), data, true)
    }

    /// A non-trainable named buffer (e.g. running statistics, fixed A).
    pub fn buffer(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Self {
        Tensor::new(shape.into(), data, false)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![E::ZERO; n], false)
    }

    pub fn scalar(v: E) -> Self {
        Tensor::new(vec![], vec![v], false)
    }

    /// Internal: an op output. `requires_grad` is inherited from the inputs.
    pub(crate) fn result(shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> Self {
        Tensor::new(shape, data, requires_grad)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Cheap handle to the underlying buffer.
    pub fn data_rc(&self) -> Rc<Vec<E>> {
        Rc::clone(&self.0.data.borrow())
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.0.data.borrow().as_ref().clone()
    }

    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.0.data.borrow()[0]
    }

    /// Replace the buffer in place (trainer/optimizer use, between graphs).
    pub fn set_data(&self, data: Vec<E>) {
        assert_eq!(data.len(), self.numel(), "set_data: length mismatch");
        *self.0.data.borrow_mut() = Rc::new(data);
    }

    /// Mutate the buffer in place. Copies only if another handle still
    /// references the same allocation (an old graph, a checkpoint view).
    pub fn update_data(&self, f: impl FnOnce(&mut [E])) {
        let mut slot = self.0.data.borrow_mut();
        let vec = Rc::make_mut(&mut slot);
        f(vec.as_mut_slice());
    }

    /// Read the gradient, or zeros when nothing flowed here.
    pub fn grad_or_zeros(&self) -> Vec<E> {
        self.0
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![E::ZERO; self.numel()])
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.0.grad.borrow().clone()
    }

    /// Take the gradient out, leaving `None` (optimizer use).
    pub fn take_grad(&self) -> Option<Vec<E>> {
        self.0.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub(crate) fn seed_grad(&self, v: E) {
        *self.0.grad.borrow_mut() = Some(vec![v; self.numel()]);
    }

    /// Run `f` with the output gradient if one was accumulated.
    pub(crate) fn with_grad<R>(&self, f: impl FnOnce(&[E]) -> R) -> Option<R> {
        let g = self.0.grad.borrow();
        g.as_deref().map(f)
    }

    /// Accumulate into this tensor's gradient via `f(&mut grad)`. Tensors on
    /// no gradient path (plain inputs) ignore the contribution.
    pub(crate) fn accum_grad(&self, f: impl FnOnce(&mut [E])) {
        if !self.0.requires_grad {
            return;
        }
        let mut g = self.0.grad.borrow_mut();
        let buf = g.get_or_insert_with(|| vec![E::ZERO; self.numel()]);
        f(buf.as_mut_slice());
    }

    /// True when a gradient should be routed to this tensor. Intermediate op
    /// outputs inherit this from their inputs, so it prunes dead branches.
    pub(crate) fn needs_grad(&self) -> bool {
        self.0.requires_grad
    }
}

type Step = Box<dyn FnOnce()>;

/// Ordered record of executed primitive ops for one forward computation.
pub struct Graph<E: Elem> {
    steps: RefCell<Vec<Step>>,
    recording: bool,
    consumed: Cell<bool>,
    _marker: std::marker::PhantomData<E>,
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Graph<E> {
    /// A recording graph: ops touching grad-requiring tensors add tape steps.
    pub fn new() -> Self {
        Graph {
            steps: RefCell::new(Vec::new()),
            recording: true,
            consumed: Cell::new(false),
            _marker: std::marker::PhantomData,
        }
    }

    /// A non-recording graph for inference; no tape, no activation retention.
    pub fn inference() -> Self {
        Graph {
            steps: RefCell::new(Vec::new()),
            recording: false,
            consumed: Cell::new(false),
            _marker: std::marker::PhantomData,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_ops(&self) -> usize {
        self.steps.borrow().len()
    }

    /// Record a backward step. No-op when not recording.
    pub(crate) fn record(&self, f: impl FnOnce() + 'static) {
        if self.recording {
            self.steps.borrow_mut().push(Box::new(f));
        }
    }

    /// Whether an op on these inputs should be recorded.
    pub(crate) fn tracks(&self, inputs: &[&Tensor<E>]) -> bool {
        self.recording && inputs.iter().any(|t| t.needs_grad())
    }

    /// Reverse-mode sweep from a scalar loss. Touches each recorded op
    /// exactly once; a second call on the same graph is a usage error.
    pub fn backward(&self, loss: &Tensor<E>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarBackward {
                shape: loss.shape().to_vec(),
            });
        }
        if self.consumed.get() {
            return Err(TensorError::GraphConsumed);
        }
        self.consumed.set(true);
        loss.seed_grad(E::ONE);
        let steps = std::mem::take(&mut *self.steps.borrow_mut());
        for step in steps.into_iter().rev() {
            step();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_roundtrip() {
        let t = Tensor::from_vec(vec![2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
        assert!(!t.requires_grad());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g: Graph<f64> = Graph::new();
        let t = Tensor::param(vec![2], vec![1.0, 2.0]);
        match g.backward(&t) {
            Err(TensorError::NonScalarBackward { shape }) => assert_eq!(shape, vec![2]),
            other => panic!("expected NonScalarBackward, got {other:?}"),
        }
    }

    #[test]
    fn backward_twice_is_usage_error() {
        let g: Graph<f64> = Graph::new();
        let t = Tensor::param(vec![], vec![1.0]);
        g.backward(&t).unwrap();
        assert!(matches!(g.backward(&t), Err(TensorError::GraphConsumed)));
    }

    #[test]
    fn update_data_copy_on_write() {
        let t: Tensor<f32> = Tensor::param(vec![2], vec![1.0, 2.0]);
        let held = t.data_rc();
        t.update_data(|d| d[0] = 9.0);
        assert_eq!(held[0], 1.0, "old handle must keep the old buffer");
        assert_eq!(t.to_vec(), vec![9.0, 2.0]);
    }
}
