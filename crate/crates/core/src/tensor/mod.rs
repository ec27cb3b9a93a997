//! Dense tensors with an optional reverse-mode computation graph.
//!
//! A [`Tensor`] either carries a graph node (it is *tracked*) or it does not.
//! Operations on untracked inputs produce untracked outputs and record nothing.
//! Gradients are computed by [`backward`] / [`vjp`]; with `retain_higher` set
//! the returned gradients are themselves tracked expressions, so they can be
//! differentiated again.

mod autograd;
mod fd;
pub(crate) mod kernels;
mod ops;
mod sample;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use autograd::{backward, vjp, GradientSet};
pub use fd::{finite_diff_gradient, rel_error};
pub use sample::SamplePlan;

pub(crate) use ops::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static LIVE_NODES: Cell<usize> = const { Cell::new(0) };
    static PEAK_NODES: Cell<usize> = const { Cell::new(0) };
    static STRICT: Cell<bool> = const { Cell::new(false) };
}

/// Counters for graph nodes alive on the current thread.
pub mod graph_stats {
    use super::{LIVE_NODES, PEAK_NODES};

    pub fn live_nodes() -> usize {
        LIVE_NODES.with(|c| c.get())
    }

    pub fn peak_nodes() -> usize {
        PEAK_NODES.with(|c| c.get())
    }

    /// Resets the peak to the current live count.
    pub fn reset_peak() {
        let live = live_nodes();
        PEAK_NODES.with(|c| c.set(live));
    }

    /// Runs `f` and returns its result with the peak number of nodes alive at
    /// any point during the call, relative to the count at entry.
    pub fn measure<R>(f: impl FnOnce() -> R) -> (R, usize) {
        let base = live_nodes();
        let saved_peak = peak_nodes();
        reset_peak();
        let out = f();
        let peak = peak_nodes().saturating_sub(base);
        PEAK_NODES.with(|c| c.set(c.get().max(saved_peak)));
        (out, peak)
    }
}

/// Enables or disables the non-finite check on every op output for the
/// current thread. Off by default.
pub fn set_strict(on: bool) {
    STRICT.with(|s| s.set(on));
}

pub fn is_strict() -> bool {
    STRICT.with(|s| s.get())
}

struct LiveToken;

impl LiveToken {
    fn new() -> Self {
        LIVE_NODES.with(|c| {
            let n = c.get() + 1;
            c.set(n);
            PEAK_NODES.with(|p| {
                if n > p.get() {
                    p.set(n)
                }
            });
        });
        LiveToken
    }
}

impl Drop for LiveToken {
    fn drop(&mut self) {
        LIVE_NODES.with(|c| c.set(c.get().saturating_sub(1)));
    }
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) op: Op<T>,
    pub(crate) parents: Vec<Tensor<T>>,
    _live: LiveToken,
}

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    node: Option<Node<T>>,
}

// Long parent chains (unrolled training loops) would overflow the stack with
// the default recursive drop.
impl<T: Scalar> Drop for Inner<T> {
    fn drop(&mut self) {
        let Some(mut node) = self.node.take() else {
            return;
        };
        let mut stack = std::mem::take(&mut node.parents);
        drop(node);
        while let Some(t) = stack.pop() {
            if let Ok(mut inner) = Arc::try_unwrap(t.inner) {
                if let Some(mut n) = inner.node.take() {
                    stack.append(&mut n.parents);
                }
            }
        }
    }
}

/// An n-dimensional array of scalars, optionally tracked for differentiation.
///
/// Cloning is cheap: clones share storage and graph node.
pub struct Tensor<T: Scalar> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let vals = self.values();
        let head: Vec<_> = vals.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("tracked", &self.is_tracked())
            .field("head", &head)
            .finish()
    }
}

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    /// Builds an untracked tensor; fails unless `product(shape) == data.len()`.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "new",
                format!("{shape:?} vs {} values", data.len()),
            ));
        }
        Ok(Self::raw(shape.to_vec(), Arc::new(data), None))
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Arc<Vec<T>>, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                node,
            }),
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        let n = data.len();
        Self::raw(vec![n], Arc::new(data), None)
    }

    pub fn scalar(v: T) -> Self {
        Self::raw(vec![], Arc::new(vec![v]), None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::raw(shape.to_vec(), Arc::new(vec![v; numel(shape)]), None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
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

    pub fn values(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.as_ref().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::shape("item", format!("{:?}", self.shape())));
        }
        Ok(self.inner.data[0])
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn is_tracked(&self) -> bool {
        self.inner.node.is_some()
    }

    /// Same values, no graph.
    pub fn detach(&self) -> Self {
        if !self.is_tracked() {
            return self.clone();
        }
        Self::raw(self.inner.shape.clone(), Arc::clone(&self.inner.data), None)
    }

    /// A new tracked leaf sharing this tensor's values. Gradients are
    /// requested against the returned handle.
    pub fn leaf(&self) -> Self {
        Self::raw(
            self.inner.shape.clone(),
            Arc::clone(&self.inner.data),
            Some(Node {
                op: Op::Leaf,
                parents: Vec::new(),
                _live: LiveToken::new(),
            }),
        )
    }

    pub(crate) fn node(&self) -> Option<&Node<T>> {
        self.inner.node.as_ref()
    }

    pub(crate) fn data_arc(&self) -> &Arc<Vec<T>> {
        &self.inner.data
    }

    /// Wraps an op result, recording a node iff any parent is tracked.
    pub(crate) fn from_op(
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        parents: Vec<Tensor<T>>,
    ) -> Result<Self> {
        if is_strict() && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let node = if parents.iter().any(Tensor::is_tracked) {
            Some(Node {
                op,
                parents,
                _live: LiveToken::new(),
            })
        } else {
            None
        };
        Ok(Self::raw(shape, Arc::new(data), node))
    }

    /// Bitwise equality of shape and values.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape() == other.shape()
            && self
                .values()
                .iter()
                .zip(other.values())
                .all(|(a, b)| a.to_f64().map(f64::to_bits) == b.to_f64().map(f64::to_bits))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.values()
            .iter()
            .zip(other.values())
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }
}
