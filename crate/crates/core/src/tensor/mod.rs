//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Feature maps follow the [B,C,H,W] layout, row-major. A tensor is a cheap
//! handle (`Rc`) onto its storage; ops record their parents and a backward
//! closure, so the computation graph is the set of live tensor handles.
//! [`Tensor::backward`] replays that graph in reverse topological order.
//!
//! All arithmetic is 64-bit so that finite-difference gradient checks are
//! meaningful at 1e-4 relative tolerance.

mod gradcheck;
mod ops;

pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::*;

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward closure: (output grad, output data, parents).
/// Must accumulate into each parent that `needs_grad`.
type GradFn = Box<dyn Fn(&[f64], &[f64], &[Tensor])>;

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                grad: None,
                requires_grad: false,
                parents: Vec::new(),
                grad_fn: None,
            })),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    pub fn rand_uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(shape, data)
    }

    pub fn requires_grad(self, yes: bool) -> Self {
        self.inner.borrow_mut().requires_grad = yes;
        self
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        grad_fn: GradFn,
    ) -> Tensor {
        let track = grad_enabled() && parents.iter().any(|p| p.needs_grad());
        let t = Tensor::new(shape, data);
        if track {
            let mut inner = t.inner.borrow_mut();
            inner.parents = parents;
            inner.grad_fn = Some(grad_fn);
        }
        t
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// [B,C,H,W] accessor; errors when the rank is not 4.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        let s = self.inner.borrow();
        if s.shape.len() != 4 {
            return Err(Error::shape(op, format!("expected rank-4 tensor, got {:?}", s.shape)));
        }
        Ok((s.shape[0], s.shape[1], s.shape[2], s.shape[3]))
    }

    pub fn data(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    pub fn with_data<T>(&self, f: impl FnOnce(&[f64]) -> T) -> T {
        f(&self.inner.borrow().data)
    }

    /// In-place value edit (optimizer steps, finite-difference probes).
    pub fn with_data_mut<T>(&self, f: impl FnOnce(&mut [f64]) -> T) -> T {
        f(&mut self.inner.borrow_mut().data)
    }

    /// Data and gradient together, for optimizer updates.
    pub fn with_data_and_grad<T>(&self, f: impl FnOnce(&mut [f64], &[f64]) -> T) -> Option<T> {
        let mut inner = self.inner.borrow_mut();
        let inner = &mut *inner;
        inner
            .grad
            .as_ref()
            .map(|g| f(&mut inner.data, g))
    }

    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn is_requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub(crate) fn needs_grad(&self) -> bool {
        let inner = self.inner.borrow();
        inner.requires_grad || inner.grad_fn.is_some()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    pub(crate) fn accum_grad(&self, g: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        match &mut inner.grad {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => inner.grad = Some(g.to_vec()),
        }
    }

    pub(crate) fn accum_grad_owned(&self, g: Vec<f64>) {
        let mut inner = self.inner.borrow_mut();
        match &mut inner.grad {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(&g) {
                    *b += v;
                }
            }
            None => inner.grad = Some(g),
        }
    }

    /// A leaf copy of this tensor's values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::new(inner.shape.clone(), inner.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    /// Reverse-mode sweep from a scalar loss. Every reachable tensor that
    /// requires grad (or feeds one) ends up holding d(loss)/d(tensor),
    /// accumulated additively across uses and across calls.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape()),
            ));
        }
        // Ordered record of executed ops, rebuilt by reverse DFS.
        let topo = self.topo_order();
        self.accum_grad(&[1.0]);
        for t in topo.iter().rev() {
            let inner = t.inner.borrow();
            if let (Some(grad_fn), Some(grad)) = (&inner.grad_fn, &inner.grad) {
                grad_fn(grad, &inner.data, &inner.parents);
            }
        }
        // Intermediate grads are scratch; free them along with the graph so
        // repeated forward passes do not accumulate stale buffers.
        for t in topo {
            let mut inner = t.inner.borrow_mut();
            if inner.grad_fn.is_some() {
                inner.grad = None;
                inner.grad_fn = None;
                inner.parents.clear();
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // Iterative post-order DFS; (node, child cursor) stack.
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.ptr_id());
        while let Some((node, cursor)) = stack.pop() {
            let next = {
                let inner = node.inner.borrow();
                inner.parents.get(cursor).cloned()
            };
            match next {
                Some(child) => {
                    stack.push((node, cursor + 1));
                    if visited.insert(child.ptr_id()) {
                        stack.push((child, 0));
                    }
                }
                None => order.push(node),
            }
        }
        order
    }
}

/// A named, trainable tensor. `frozen` parameters keep their gradients but
/// are skipped by optimizer steps.
#[derive(Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter {
            name: name.into(),
            tensor: tensor.requires_grad(true),
            frozen: false,
        }
    }

    pub fn frozen(mut self, yes: bool) -> Self {
        self.frozen = yes;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::ops::*;
    use super::*;

    #[test]
    fn backward_square_at_three() {
        let x = Tensor::scalar(3.0).requires_grad(true);
        let y = mul(&x, &x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).requires_grad(true);
        let y = add(&x, &x).unwrap();
        assert!(y.backward().is_err());
    }

    #[test]
    fn two_uses_accumulate_additively() {
        // loss = x*x + x  =>  dloss/dx = 2x + 1
        let x = Tensor::scalar(4.0).requires_grad(true);
        let sq = mul(&x, &x).unwrap();
        let loss = add(&sq, &x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![9.0]);
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let x = Tensor::scalar(2.0).requires_grad(true);
        let y = no_grad(|| mul(&x, &x).unwrap());
        assert!(!y.needs_grad());
    }

    #[test]
    fn detach_cuts_graph() {
        let x = Tensor::scalar(2.0).requires_grad(true);
        let y = mul(&x, &x).unwrap().detach();
        let z = mul(&y, &y).unwrap();
        assert!(!z.needs_grad());
        assert_eq!(z.item(), 16.0);
    }
}
