//! Dense f64 arrays with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a row-major n-d array. Operations live on [`Tape`]: a
//! recording tape computes values and registers nodes for backward, a
//! [`Tape::no_grad`] tape computes values only. Values are validated to be
//! finite at every op boundary so a NaN fails fast at its source instead of
//! propagating into a loss.

mod gradcheck;
mod kernels;
mod shape;
mod tape;

pub use gradcheck::grad_check;
pub use shape::{broadcast_shape, strides_for};
pub use tape::Tape;

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

/// Elementwise binary operation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Elementwise unary operation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Softplus,
    Exp,
    Log,
    Sqrt,
    Neg,
}

/// Reduction kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Max,
    Mean,
    Sum,
}

pub(crate) struct TensorInner {
    shape: Vec<usize>,
    /// Copy-on-write storage: cheap to snapshot into tape nodes, and in-place
    /// mutation (optimizer updates) only copies when a snapshot is still alive.
    data: RefCell<Rc<Vec<f64>>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    /// (tape id, node id) of the most recent registration.
    binding: Cell<Option<(u64, usize)>>,
}

/// A dense row-major array of 64-bit floats.
///
/// Cloning a `Tensor` is cheap and shares storage; use [`Tensor::deep_clone`]
/// for an independent copy.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<TensorInner>,
}

impl Tensor {
    /// Builds a leaf tensor from explicit values.
    pub fn new(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        if numel != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {numel} elements, got {} values",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput("tensor_new".into()));
        }
        Ok(Self::from_parts(shape, values, requires_grad))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(Rc::new(values)),
                grad: RefCell::new(None),
                requires_grad,
                binding: Cell::new(None),
            }),
        }
    }

    pub(crate) fn from_rc(shape: Vec<usize>, data: Rc<Vec<f64>>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                binding: Cell::new(None),
            }),
        }
    }

    /// Constant (non-differentiable) tensor.
    pub fn constant(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::new(shape, values, false)
    }

    /// Shape-`[1]` constant holding `v`.
    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![1], vec![v], false)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape, vec![0.0; n], false)
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape, vec![v; n], false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Borrow of the underlying values.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.data.borrow(), |rc| rc.as_slice())
    }

    /// Snapshot of the current storage; O(1) until someone mutates.
    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        self.inner.data.borrow().clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().to_vec()
    }

    /// The single element of a scalar-shaped tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data()[0]
    }

    /// Mutates the values in place. Snapshots taken by live tape nodes keep
    /// the old values (copy-on-write), so a backward pass is unaffected by
    /// updates applied after it was recorded.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        let mut borrow = self.inner.data.borrow_mut();
        f(Rc::make_mut(&mut borrow).as_mut_slice());
    }

    /// Replaces the values wholesale; the shape must match.
    pub fn set_data(&self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "set_data: {} values into shape {:?}",
                values.len(),
                self.shape()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput("set_data".into()));
        }
        *self.inner.data.borrow_mut() = Rc::new(values);
        Ok(())
    }

    /// Accumulated gradient, if a backward pass has populated it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Adds into the gradient buffer (creating it if absent), the same way
    /// backward does.
    pub fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Independent copy: value-equal, storage-independent, gradient cleared.
    pub fn deep_clone(&self) -> Self {
        Self::from_parts(
            self.inner.shape.clone(),
            self.to_vec(),
            self.inner.requires_grad,
        )
    }

    /// Non-differentiable view of the same values.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.inner.shape.clone(), self.to_vec(), false)
    }

    pub(crate) fn binding(&self) -> Option<(u64, usize)> {
        self.inner.binding.get()
    }

    pub(crate) fn bind(&self, tape_id: u64, node_id: usize) {
        self.inner.binding.set(Some((tape_id, node_id)));
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let data = self.data();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, data={:?}{})",
            self.shape(),
            self.requires_grad(),
            preview,
            if data.len() > 8 { ", ..." } else { "" }
        )
    }
}

pub(crate) fn check_finite(values: &[f64], op: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteInput(op.into()))
    }
}
