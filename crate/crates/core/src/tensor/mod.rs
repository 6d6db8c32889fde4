//! Dense row-major tensors with tape-free reverse-mode differentiation.
//!
//! Every [`Tensor`] is an immutable value behind an `Arc`. Ops that consume
//! at least one gradient-tracking input record their parents and a backward
//! closure on the output; [`Tensor::backward`] walks that graph in reverse
//! topological order and leaves a gradient on every reachable tensor that
//! requires one.

mod checkpoint;
mod conv;
mod gradcheck;
mod ops;
mod resize;

pub use checkpoint::{Checkpoint, CheckpointEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use conv::{conv2d, conv3d};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub(crate) use gradcheck::rel_error;
pub use resize::{bilinear_resize, trilinear_resize};

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::iter::Sum;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use num_traits::{Float, NumAssign};
use parking_lot::Mutex;

use crate::error::{Error, Result};

/// Scalar types a tensor can hold. Implemented for `f32` (model execution)
/// and `f64` (oracle and gradient checks).
pub trait Element:
    Float + NumAssign + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// `c = alpha * a * b + beta * c` for an `m x k` by `k x n` product with
    /// arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

fn span(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
    }
}

macro_rules! impl_element {
    ($t:ty, $gemm:path) => {
        impl Element for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                assert!(a.len() >= span(m, k, a_strides), "gemm: lhs buffer too small");
                assert!(b.len() >= span(k, n, b_strides), "gemm: rhs buffer too small");
                assert!(c.len() >= span(m, n, c_strides), "gemm: output buffer too small");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above bound every element the kernel touches.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    )
                }
            }

            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

/// Backward closure: receives the output gradient and the output values and
/// returns one optional gradient per parent, in parent order.
pub type BackwardFn<T> = Box<dyn Fn(&[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct GradNode<T: Element> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<GradNode<T>>,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` without recording a backward graph on this thread.
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

/// A dense tensor. Cloning is cheap and shares storage and graph identity.
pub struct Tensor<T: Element = f32> {
    inner: Arc<Inner<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish_non_exhaustive()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Element count of `shape`.
pub fn numel_of(shape: &[usize]) -> usize {
    numel(shape)
}

impl<T: Element> Tensor<T> {
    fn build(shape: Vec<usize>, data: Arc<Vec<T>>, requires_grad: bool, node: Option<GradNode<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                node,
            }),
        }
    }

    /// A constant tensor. Fails if `data.len()` does not match the shape.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements, buffer has {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::build(shape.to_vec(), Arc::new(data), false, None))
    }

    /// A leaf that accumulates gradients during [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(t.with_requires_grad(true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::build(shape.to_vec(), Arc::new(vec![value; numel(shape)]), false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(Vec::new(), Arc::new(vec![value]), false, None)
    }

    /// Same values, detached from any graph, with the given tracking flag.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        Self::build(self.inner.shape.clone(), Arc::clone(&self.inner.data), requires_grad, None)
    }

    /// Same values without graph history.
    pub fn detach(&self) -> Self {
        self.with_requires_grad(false)
    }

    /// Result of a differentiable op. The backward closure is only kept when
    /// gradient recording is on and a parent tracks gradients.
    pub fn from_op(shape: Vec<usize>, data: Vec<T>, parents: Vec<Tensor<T>>, backward: BackwardFn<T>) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            Self::build(shape, Arc::new(data), true, Some(GradNode { parents, backward }))
        } else {
            Self::build(shape, Arc::new(data), false, None)
        }
    }

    /// Shares storage with `self` under a different shape.
    pub(crate) fn share_as(&self, shape: Vec<usize>, parents: Vec<Tensor<T>>, backward: BackwardFn<T>) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let node = track.then_some(GradNode { parents, backward });
        Self::build(shape, Arc::clone(&self.inner.data), track, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Gradient accumulated by the last backward pass(es), if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock() = None;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    /// Identity of the underlying node (shared by clones).
    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn same_node(&self, other: &Tensor<T>) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Convert element type (cuts the graph).
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::of(v.as_f64())).collect();
        Tensor::build(self.shape().to_vec(), Arc::new(data), false, None)
    }

    /// Backpropagate from a one-element tensor, seeding its gradient with 1.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward() needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        self.backward_with(vec![T::one()])
    }

    /// Backpropagate an explicit output gradient.
    pub fn backward_with(&self, seed: Vec<T>) -> Result<()> {
        if seed.len() != self.numel() {
            return Err(Error::Shape(format!(
                "seed gradient has {} elements, tensor has {}",
                seed.len(),
                self.numel()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), seed);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            if let Some(node) = &t.inner.node {
                let grads = (node.backward)(&g, t.data());
                debug_assert_eq!(grads.len(), node.parents.len());
                for (parent, pg) in node.parents.iter().zip(grads) {
                    let Some(pg) = pg else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), parent.numel());
                    match pending.get_mut(&parent.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                        None => {
                            pending.insert(parent.id(), pg);
                        }
                    }
                }
            }
            let mut slot = t.inner.grad.lock();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self` that require gradients, parents before children.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((t, next)) = stack.pop() {
            let parents = t.inner.node.as_ref().map(|n| n.parents.as_slice()).unwrap_or(&[]);
            if next < parents.len() {
                let p = parents[next].clone();
                stack.push((t, next + 1));
                if p.requires_grad() && visited.insert(p.id()) {
                    stack.push((p, 0));
                }
            } else {
                order.push(t);
            }
        }
        order
    }
}

impl<T: Element> Drop for Inner<T> {
    // Long op chains would otherwise drop recursively through `parents`.
    fn drop(&mut self) {
        let mut stack: Vec<Tensor<T>> = self.node.take().map(|n| n.parents).unwrap_or_default();
        while let Some(t) = stack.pop() {
            if let Ok(mut inner) = Arc::try_unwrap(t.inner) {
                if let Some(n) = inner.node.take() {
                    stack.extend(n.parents);
                }
            }
        }
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
