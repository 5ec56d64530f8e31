//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every operation eagerly computes its forward value and, when gradients are
//! enabled and at least one input requires them, records a backward closure on
//! the result node. `Tensor::backward` walks the recorded graph in reverse
//! topological order and accumulates gradients into every reachable tensor
//! that requires them.
//!
//! Tensors are `Rc` handles: cloning is cheap and two clones alias the same
//! storage. Parameter data may be mutated in place (optimizer updates) between
//! forward/backward passes, never during one.

mod gradcheck;
mod ops;
mod rng;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;
use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_sampled};
pub use ops::{concat, embedding_lookup, AttnMask};
pub use rng::SeededRng;

/// Scalar element type for tensors. 64-bit is used by the gradient-check
/// suite, 32-bit everywhere training throughput matters.
pub trait Scalar: Float + fmt::Debug + fmt::Display + Default + 'static {
    const NAME: &'static str;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("backward requires a scalar loss, got {numel} elements")]
    NotScalar { numel: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: non-finite value produced at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

type BackwardFn<T> = Box<dyn Fn(&[T], &[Tensor<T>])>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static FINITE_CHECK: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled (evaluation / generation).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Toggles the fail-loud finite check applied to every op output.
pub fn set_finite_check(on: bool) -> bool {
    FINITE_CHECK.with(|c| c.replace(on))
}

fn finite_check_enabled() -> bool {
    FINITE_CHECK.with(|c| c.get())
}

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

// Graphs can be thousands of nodes deep (unrolled LSTMs); the default
// recursive Rc drop would overflow the stack, so cascade iteratively.
impl<T: Scalar> Drop for Inner<T> {
    fn drop(&mut self) {
        let mut stack = std::mem::take(&mut self.parents);
        while let Some(t) = stack.pop() {
            if let Ok(mut inner) = Rc::try_unwrap(t.inner) {
                stack.append(&mut inner.parents);
            }
        }
    }
}

pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
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
        let data = self.inner.data.borrow();
        let preview: Vec<&T> = data.iter().take(8).collect();
        write!(
            f,
            "Tensor<{}>(id={}, shape={:?}, data≈{:?}{})",
            T::NAME,
            self.inner.id,
            self.inner.shape,
            preview,
            if data.len() > 8 { ", …" } else { "" }
        )
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        parents: Vec<Tensor<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// Leaf constant; does not require gradients.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::new_inner(shape.to_vec(), data, false, Vec::new(), None))
    }

    /// Leaf parameter; gradients accumulate here during backward.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        // Rebuild with the flag set; cheaper than exposing a setter.
        Ok(Self::new_inner(
            t.inner.shape.clone(),
            t.inner.data.borrow().clone(),
            true,
            Vec::new(),
            None,
        ))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new_inner(
            shape.to_vec(),
            vec![T::zero(); numel_of(shape)],
            false,
            Vec::new(),
            None,
        )
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::new_inner(shape.to_vec(), vec![v; numel_of(shape)], false, Vec::new(), None)
    }

    pub fn scalar(v: T) -> Self {
        Self::new_inner(Vec::new(), vec![v], false, Vec::new(), None)
    }

    /// Builds an op result node: runs the finite check and drops the graph
    /// edge when recording is off or no parent requires gradients.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Result<Self> {
        if finite_check_enabled() {
            if let Some(index) = data.iter().position(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op, index });
            }
        }
        let record = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if record {
            Ok(Self::new_inner(shape, data, true, parents, Some(backward)))
        } else {
            Ok(Self::new_inner(shape, data, false, Vec::new(), None))
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    /// Replaces the stored values (optimizer update). Panics on length
    /// mismatch; shapes never change after construction.
    pub fn set_data(&self, data: Vec<T>) {
        assert_eq!(data.len(), self.numel(), "set_data length mismatch");
        *self.inner.data.borrow_mut() = data;
    }

    /// In-place mutation of the stored values.
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn take_grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow_mut().take()
    }

    /// Leaf copy that shares no graph history and requires no gradients.
    pub fn detach(&self) -> Tensor<T> {
        Self::new_inner(
            self.inner.shape.clone(),
            self.inner.data.borrow().clone(),
            false,
            Vec::new(),
            None,
        )
    }

    /// Reverse-mode accumulation from a scalar loss. Gradients sum over
    /// fan-out; intermediate grads are freed as soon as they are consumed.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar { numel: self.numel() });
        }
        if !self.inner.requires_grad {
            // Constant loss: nothing reachable, all gradients are zero.
            return Ok(());
        }
        let order = self.topo_order();
        self.accumulate_grad(&[T::one()]);
        for node in order.iter().rev() {
            let Some(grad_out) = node.take_grad() else {
                continue;
            };
            if let Some(back) = &node.inner.backward {
                back(&grad_out, &node.inner.parents);
            }
        }
        Ok(())
    }

    /// Post-order over recorded (internal) nodes; leaves are excluded.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        if self.inner.backward.is_none() {
            return order;
        }
        visited.insert(self.id());
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        while let Some((node, idx)) = stack.pop() {
            let parents = &node.inner.parents;
            if idx < parents.len() {
                let parent = parents[idx].clone();
                stack.push((node, idx + 1));
                if parent.inner.backward.is_some() && visited.insert(parent.id()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::<f64>::from_vec(&[2, 2], vec![1.0; 3]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn identity_loss_grad_is_one() {
        let x = Tensor::parameter(&[], vec![3.0f64]).unwrap();
        let loss = x.scale(1.0).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let x = Tensor::parameter(&[], vec![3.0f64]).unwrap();
        let loss = x.add(&x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::parameter(&[2], vec![1.0f64, 2.0]).unwrap();
        let y = x.add(&x).unwrap();
        assert!(matches!(y.backward(), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn constant_loss_backward_is_noop() {
        let c = Tensor::<f64>::scalar(5.0);
        c.backward().unwrap();
        assert!(c.grad().is_none());
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let x = Tensor::parameter(&[], vec![2.0f64]).unwrap();
        let y = x.mul(&x).unwrap().detach();
        let loss = y.mul(&y).unwrap();
        loss.backward().unwrap();
        assert!(x.grad().is_none());
        assert!(y.grad().is_none());
    }

    #[test]
    fn no_grad_disables_recording() {
        let x = Tensor::parameter(&[], vec![2.0f64]).unwrap();
        let y = no_grad(|| x.mul(&x).unwrap());
        assert!(!y.requires_grad());
    }

    #[test]
    fn deep_graph_drops_without_overflow() {
        let x = Tensor::parameter(&[4], vec![0.1f64; 4]).unwrap();
        let mut y = x.clone();
        for _ in 0..200_000 {
            y = y.scale(1.0).unwrap();
        }
        drop(y);
    }

    #[test]
    fn grad_zeroing() {
        let x = Tensor::parameter(&[], vec![3.0f64]).unwrap();
        let loss = x.mul(&x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }
}
