//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Tensors form an immutable expression DAG: every op records its parents and
//! a backward closure, and [`backward`] runs one reverse-topological sweep
//! that accumulates gradients additively across fan-out. Training arithmetic
//! runs at `f32`; the same code instantiated at `f64` is used for gradient
//! checking.

mod backward;
mod init;
pub mod ops;

pub use backward::backward;
pub use init::{truncated_normal, Rng64};

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Element type of a tensor: `f32` for training, `f64` for checking.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Shorthand for converting an `f64` literal to the active scalar type.
#[inline]
pub fn cf<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("literal not representable")
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// True when ops should record the autodiff graph.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Disables graph recording for the guard's lifetime (inference paths).
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|c| c.replace(false));
        NoGradGuard { prev }
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T])>;

pub(crate) struct TensorInner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Rc<RefCell<Vec<T>>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    backward_fn: Option<BackwardFn<T>>,
}

/// Handle to a node in the expression DAG. Cloning is cheap (refcount).
pub struct Tensor<T: Scalar> {
    inner: Rc<TensorInner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

impl<T: Scalar> Tensor<T> {
    /// Constant leaf tensor.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        Self::leaf(shape, data, false)
    }

    /// Trainable leaf tensor (accumulates a gradient in `backward`).
    pub fn param(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        Self::leaf(shape, data, true)
    }

    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Internal(format!(
                "shape {:?} implies {} elements but data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                id: next_id(),
                shape,
                data: Rc::new(RefCell::new(data)),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward_fn: None,
            }),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::leaf(shape, vec![T::zero(); numel], false).expect("consistent by construction")
    }

    pub fn scalar(v: T) -> Self {
        Self::leaf(vec![], vec![v], false).expect("consistent by construction")
    }

    /// Result of an op: `parents` drive the reverse sweep, `backward` scatters
    /// this node's gradient into theirs. Recording is skipped when no parent
    /// requires a gradient or recording is disabled.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl FnOnce() -> BackwardFn<T>,
    ) -> Self {
        Self::from_op_shared(shape, Rc::new(RefCell::new(data)), parents, backward)
    }

    pub(crate) fn from_op_shared(
        shape: Vec<usize>,
        data: Rc<RefCell<Vec<T>>>,
        parents: Vec<Tensor<T>>,
        backward: impl FnOnce() -> BackwardFn<T>,
    ) -> Self {
        let record = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let numel: usize = shape.iter().product();
        debug_assert_eq!(numel, data.borrow().len());
        Tensor {
            inner: Rc::new(TensorInner {
                id: next_id(),
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad: record,
                parents: if record { parents } else { Vec::new() },
                backward_fn: if record { Some(backward()) } else { None },
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    /// Copy of the data as a plain vector.
    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1);
        self.inner.data.borrow()[0]
    }

    /// In-place data mutation; used by the optimizer on leaf parameters and
    /// never on recorded graph nodes.
    pub fn data_mut(&self) -> std::cell::RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    pub(crate) fn shared_data(&self) -> Rc<RefCell<Vec<T>>> {
        Rc::clone(&self.inner.data)
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Adds `delta` into the gradient accumulator, allocating zeros first if
    /// this is the first contribution.
    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        self.with_grad_mut(|g| {
            for (gi, &di) in g.iter_mut().zip(delta) {
                *gi = *gi + di;
            }
        });
    }

    /// Runs `f` over the lazily allocated gradient buffer.
    pub(crate) fn with_grad_mut(&self, f: impl FnOnce(&mut [T])) {
        let mut slot = self.inner.grad.borrow_mut();
        let g = slot.get_or_insert_with(|| vec![T::zero(); self.len()]);
        f(g);
    }

    pub(crate) fn parents(&self) -> &[Tensor<T>] {
        &self.inner.parents
    }

    pub(crate) fn backward_fn(&self) -> Option<&BackwardFn<T>> {
        self.inner.backward_fn.as_ref()
    }

    /// Detached constant view of this tensor's current data.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::from_vec(self.inner.shape.clone(), self.to_vec()).expect("shape matches data")
    }
}
