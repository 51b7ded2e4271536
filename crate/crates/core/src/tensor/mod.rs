//! Dense row-major `f64` tensors with reverse-mode differentiation.
//!
//! Every op that has at least one input requiring a gradient records its
//! parents and a local-gradient closure on the output node. Node ids are
//! drawn from a monotonically increasing per-thread counter, so sorting the
//! reachable nodes by descending id replays the tape in reverse execution
//! order. Tensors are immutable once built; only leaf gradient buffers
//! change, and they accumulate across `backward` calls until reset.

mod conv;
mod linalg;
mod nn;
mod ops;

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

pub use conv::Conv2dSpec;

type BackwardFn = Box<dyn Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>>>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRADIENT_FAULT: Cell<Option<&'static str>> = const { Cell::new(None) };
}

static ZERO_NORM_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of zero-norm vectors met by cosine-style normalisation so far.
pub fn zero_norm_events() -> u64 {
    ZERO_NORM_EVENTS.load(Ordering::Relaxed)
}

pub(crate) fn record_zero_norm() {
    ZERO_NORM_EVENTS.fetch_add(1, Ordering::Relaxed);
}

/// Test hook: scale every local gradient produced by `op` on this thread
/// by 1.5 so gradient checks can be shown to catch a broken backward.
#[doc(hidden)]
pub fn set_gradient_fault(op: Option<&'static str>) {
    GRADIENT_FAULT.with(|f| f.set(op));
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

struct Node {
    id: u64,
    op: &'static str,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("op", &self.0.op)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: next_id(),
            op: "leaf",
            shape,
            grad: RefCell::new(requires_grad.then(Vec::new)),
            data,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Builds an op output. Parents and the closure are kept only when some
    /// parent takes part in differentiation.
    pub(crate) fn from_op<F>(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: F,
    ) -> Tensor
    where
        F: Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let (parents, backward): (Vec<Tensor>, Option<BackwardFn>) = if requires_grad {
            (parents, Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        Tensor(Rc::new(Node {
            id: next_id(),
            op,
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward,
        }))
    }

    /// A constant tensor (no gradient).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::checked(shape, data, false)
    }

    /// A trainable leaf whose gradient is populated by [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::checked(shape, data, true)
    }

    fn checked(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "dimension sizes must be positive, got {shape:?}"
            )));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape("new", shape, &[data.len()]));
        }
        Ok(Self::leaf(shape.to_vec(), data, requires_grad))
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::leaf(Vec::new(), vec![value], false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::leaf(shape.to_vec(), vec![0.0; numel(shape)], false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Accumulated gradient of a leaf; `None` for tensors outside
    /// differentiation or before any backward pass reached them.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0
            .grad
            .borrow()
            .as_ref()
            .filter(|g| !g.is_empty())
            .cloned()
    }

    pub fn zero_grad(&self) {
        if self.0.requires_grad {
            *self.0.grad.borrow_mut() = Some(Vec::new());
        }
    }

    /// Same values, cut from the tape.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), false)
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::InvalidArgument(format!(
                "{op} expects a 2-D tensor, got shape {other:?}"
            ))),
        }
    }

    /// Reverse pass from a single-element loss.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.0.id) {
                continue;
            }
            stack.extend(t.0.parents.iter().cloned());
            order.push(t);
        }
        order.sort_unstable_by_key(|t| std::cmp::Reverse(t.0.id));

        let fault = GRADIENT_FAULT.with(Cell::get);
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.0.id, vec![1.0]);
        for node in order {
            let Some(g) = pending.remove(&node.0.id) else {
                continue;
            };
            let Some(backward) = node.0.backward.as_ref() else {
                let mut slot = node.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) if acc.len() == g.len() => {
                        acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b)
                    }
                    _ => *slot = Some(g),
                }
                continue;
            };
            let local = backward(&node.0.data, &g);
            debug_assert_eq!(local.len(), node.0.parents.len());
            for (parent, pg) in node.0.parents.iter().zip(local) {
                let Some(mut pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                if fault == Some(node.0.op) {
                    pg.iter_mut().for_each(|v| *v *= 1.5);
                }
                match pending.get_mut(&parent.0.id) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => {
                        pending.insert(parent.0.id, pg);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::param(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn sum_of_squares_gives_twice_x() {
        let vals = vec![1.0, -2.0, 3.0, 0.5];
        let x = Tensor::param(&[4], vals.clone()).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        let want: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        assert_eq!(x.grad().unwrap(), want);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = x.sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 3]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(x.scale(2.0).backward().is_err());
    }

    #[test]
    fn shared_subexpression_visited_once() {
        // y = x*x used twice: d(sum(y + y))/dx = 4x
        let x = Tensor::param(&[2], vec![1.5, -1.0]).unwrap();
        let y = x.mul(&x).unwrap();
        y.add(&y).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, -4.0]);
    }

    #[test]
    fn constants_do_not_record() {
        let a = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let b = a.scale(3.0);
        assert!(!b.requires_grad());
        assert!(b.0.parents.is_empty());
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
    }
}
