//! Dense fp64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are reference-counted handles; cloning a `Tensor` clones the
//! handle, not the storage. Every op records its parents and a backward
//! closure, so a loss scalar carries the whole computation graph behind it.
//! Gradients accumulate into leaf tensors (the caller zeroes them between
//! steps), which is what lets multi-term objectives compose by summation.
//!
//! Layout is row-major NCHW throughout the project. All math is fp64.

mod conv;
pub mod gradcheck;
mod ops;

pub use conv::conv2d;
pub use ops::{
    add, bce_logits_elem, bilinear_upsample, cross_entropy_masked, kl_div_const_teacher,
    leaky_relu, mean, mul, neg_p_log_p, scale, softmax_channel, sub, sum,
};

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Backward closure: maps the output gradient to one gradient per parent,
/// in parent order.
type BackFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Cell {
    id: u64,
    shape: Vec<usize>,
    values: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward_fn: Option<BackFn>,
}

/// Shared handle to a tensor node.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Cell>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_finite(values: &[f64]) {
    for &v in values {
        assert!(v.is_finite(), "non-finite tensor value: {v}");
    }
}

impl Tensor {
    /// Constant leaf.
    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Tensor {
        Self::leaf(shape, values, false)
    }

    /// Trainable leaf (gradient slot populated by backward).
    pub fn param(shape: &[usize], values: Vec<f64>) -> Tensor {
        Self::leaf(shape, values, true)
    }

    pub fn leaf(shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape/value length mismatch"
        );
        check_finite(&values);
        Tensor {
            inner: Rc::new(Cell {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: shape.to_vec(),
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward_fn: None,
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Self::from_values(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::from_values(&[1], vec![v])
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        backward_fn: BackFn,
    ) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        check_finite(&values);
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Tensor {
                inner: Rc::new(Cell {
                    id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                    shape,
                    values: RefCell::new(values),
                    grad: RefCell::new(None),
                    requires_grad: true,
                    parents,
                    backward_fn: Some(backward_fn),
                }),
            }
        } else {
            // No differentiable ancestry: drop the graph edges.
            Tensor::from_values(&shape, values)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.backward_fn.is_none()
    }

    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        self.inner.values.borrow()
    }

    pub fn values_vec(&self) -> Vec<f64> {
        self.inner.values.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.values.borrow()[0]
    }

    /// In-place value update; only meaningful on leaves (optimizer steps).
    pub fn set_values(&self, values: &[f64]) {
        assert!(self.is_leaf(), "set_values on non-leaf tensor");
        assert_eq!(values.len(), self.numel());
        check_finite(values);
        self.inner.values.borrow_mut().copy_from_slice(values);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// New constant leaf sharing this tensor's current values.
    pub fn detach(&self) -> Tensor {
        Tensor::from_values(&self.inner.shape, self.values_vec())
    }

    /// Argmax over the channel axis of an NCHW tensor; ties break to the
    /// lowest class index. Returns per-pixel class ids, flattened [N,H,W].
    pub fn argmax_channel(&self) -> Vec<u8> {
        let s = self.shape();
        assert_eq!(s.len(), 4, "argmax_channel expects NCHW");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let v = self.values();
        let hw = h * w;
        let mut out = vec![0u8; n * hw];
        for i in 0..n {
            for p in 0..hw {
                let mut best = 0usize;
                let mut best_v = v[i * c * hw + p];
                for k in 1..c {
                    let x = v[i * c * hw + k * hw + p];
                    if x > best_v {
                        best_v = x;
                        best = k;
                    }
                }
                out[i * hw + p] = best as u8;
            }
        }
        out
    }
}

/// Topologically ordered record of the ops behind a tensor.
pub struct Graph {
    order: Vec<Tensor>,
}

impl Graph {
    /// Traces the graph below `root`; inputs always precede their consumers.
    pub fn trace(root: &Tensor) -> Graph {
        let mut order = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        // Iterative post-order DFS.
        let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
        seen.insert(root.id());
        while let Some((node, child)) = stack.pop() {
            if child < node.inner.parents.len() {
                let next = node.inner.parents[child].clone();
                stack.push((node, child + 1));
                if seen.insert(next.id()) {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }
        Graph { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Reverse-mode sweep. Populates (accumulates into) the grad slots of all
/// `requires_grad` leaves reachable from `loss`.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let graph = Graph::trace(loss);
    let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
    grads.insert(loss.id(), vec![1.0]);
    for node in graph.order.iter().rev() {
        let Some(g_out) = grads.remove(&node.id()) else {
            continue;
        };
        if let Some(back) = &node.inner.backward_fn {
            let parent_grads = back(&g_out);
            debug_assert_eq!(parent_grads.len(), node.inner.parents.len());
            for (parent, pg) in node.inner.parents.iter().zip(parent_grads) {
                if !parent.requires_grad() {
                    continue;
                }
                match grads.get_mut(&parent.id()) {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&pg) {
                            *a += b;
                        }
                    }
                    None => {
                        grads.insert(parent.id(), pg);
                    }
                }
            }
        } else if node.requires_grad() {
            node.accumulate_grad(&g_out);
        }
    }
    Ok(())
}
