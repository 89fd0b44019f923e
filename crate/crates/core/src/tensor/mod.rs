//! Dense f64 tensors with tape-free reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value; recorded ops link result tensors back
//! to their inputs, and [`Tensor::backward`] walks that graph once, deposits
//! gradients on `requires_grad` leaves, and releases the graph. Graphs are
//! rebuilt every step, which keeps the engine simple and makes finite
//! difference checks trustworthy. One graph belongs to one logical thread;
//! tensors that do not track gradients are plain read-only values.

pub mod kernels;
mod ops;

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

pub use kernels::{numel, strides_of};

/// Errors from tensor construction and ops.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Backward rule: maps the gradient at this node to per-parent
/// contributions (None for parents that do not track gradients).
type BackFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    parents: Vec<Tensor>,
    back: BackFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    tracks: bool,
    grad: RefCell<Option<Vec<f64>>>,
    node: RefCell<Option<Node>>,
}

/// Dense row-major f64 tensor, cheaply clonable (shared storage).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new_inner(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, tracks: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                tracks,
                grad: RefCell::new(None),
                node: RefCell::new(None),
            }),
        }
    }

    /// Leaf tensor from raw data; fails unless `product(shape) == data.len()`.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(TensorError::Dimension(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor::new_inner(shape.to_vec(), data, false, false))
    }

    /// Leaf parameter: tracked by autodiff, receives a gradient on backward.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(Tensor::new_inner(
            t.inner.shape.clone(),
            t.inner.data.clone(),
            true,
            true,
        ))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new_inner(shape.to_vec(), vec![0.0; numel(shape)], false, false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::new_inner(shape.to_vec(), vec![value; numel(shape)], false, false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new_inner(vec![], vec![value], false, false)
    }

    /// Result of a recorded op. Tracks iff any parent tracks.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, back: BackFn) -> Tensor {
        let tracks = parents.iter().any(|p| p.inner.tracks);
        let t = Tensor::new_inner(shape, data, false, tracks);
        if tracks {
            *t.inner.node.borrow_mut() = Some(Node { parents, back });
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn tracks(&self) -> bool {
        self.inner.tracks
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(TensorError::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data[0])
    }

    /// Accumulated gradient of a leaf, if present.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Removes and returns the accumulated gradient.
    pub fn take_grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow_mut().take()
    }

    fn acc_grad(&self, contribution: Vec<f64>) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(contribution) {
                    *b += v;
                }
            }
            None => *slot = Some(contribution),
        }
    }

    /// Untracked copy of this tensor's current value.
    pub fn detach(&self) -> Tensor {
        Tensor::new_inner(self.inner.shape.clone(), self.inner.data.clone(), false, false)
    }

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` leaf reachable through recorded ops, then releases
    /// the graph so intermediate buffers can be freed.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.inner.tracks {
            return Err(TensorError::Usage(
                "backward() on a tensor with no recorded graph".into(),
            ));
        }

        // Iterative post-order DFS; reversed it yields a topological order.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((t, child_idx)) = stack.pop() {
            let next_child = {
                let node = t.inner.node.borrow();
                node.as_ref().and_then(|n| {
                    n.parents
                        .iter()
                        .skip(child_idx)
                        .enumerate()
                        .find(|(_, p)| p.inner.tracks && !visited.contains(&p.inner.id))
                        .map(|(off, p)| (child_idx + off + 1, p.clone()))
                })
            };
            match next_child {
                Some((resume_idx, child)) => {
                    visited.insert(child.inner.id);
                    stack.push((t, resume_idx));
                    stack.push((child, 0));
                }
                None => order.push(t),
            }
        }

        self.acc_grad(vec![1.0]);
        for t in order.iter().rev() {
            let node = t.inner.node.borrow_mut().take();
            let Some(node) = node else { continue };
            let grad = t
                .inner
                .grad
                .borrow()
                .clone()
                .unwrap_or_else(|| vec![0.0; t.len()]);
            let contributions = (node.back)(&grad);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (parent, contrib) in node.parents.iter().zip(contributions) {
                if let Some(c) = contrib {
                    if parent.inner.tracks {
                        debug_assert_eq!(c.len(), parent.len());
                        parent.acc_grad(c);
                    }
                }
            }
            if !t.inner.requires_grad {
                *t.inner.grad.borrow_mut() = None;
            }
            // node dropped here: graph edges released.
        }
        // The loss itself is usually not a leaf; drop its seed gradient.
        if !self.inner.requires_grad {
            *self.inner.grad.borrow_mut() = None;
        }
        Ok(())
    }
}

/// Broadcast two shapes, NumPy-style (right aligned).
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Strides for reading a tensor of `shape` as if broadcast to `target`
/// (stride 0 along broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let strides = strides_of(shape);
    let mut out = vec![0usize; target.len()];
    let offset = target.len() - shape.len();
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 { 0 } else { strides[i] };
    }
    out
}
