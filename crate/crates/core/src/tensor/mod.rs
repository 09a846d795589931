//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are cheap handles (`Rc`) over row-major storage. Ops executed
//! inside a [`Tape::scope`] record a backward closure; replaying the tape in
//! reverse accumulates `d(loss)/d(leaf)` into every leaf that requires a
//! gradient. Gradients accumulate (`+=`) across backward passes until
//! explicitly zeroed, so a multi-term loss can be backpropagated jointly or
//! term-by-term (on separate tapes) with identical results.
//!
//! A tape and its tensors are confined to one thread; distinct tapes may run
//! on distinct threads.

mod ops;

pub use ops::BatchNormMode;

use std::cell::{Cell, RefCell};
use std::rc::{Rc, Weak};

use crate::error::{Error, Result};

struct TensorInner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    /// Set when this tensor was produced by an op while a tape was active.
    interior: Cell<bool>,
    /// Tape holding the op that produced this tensor.
    tape: RefCell<Weak<TapeInner>>,
}

/// Dense n-dimensional f64 array participating in reverse-mode AD.
#[derive(Clone)]
pub struct Tensor(Rc<TensorInner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad.get())
            .finish()
    }
}

impl Tensor {
    /// Leaf tensor from row-major data.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!(
                    "shape {:?} implies {} elements, data has {}",
                    shape,
                    numel,
                    data.len()
                ),
            });
        }
        Ok(Tensor(Rc::new(TensorInner {
            shape: shape.to_vec(),
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(false),
            interior: Cell::new(false),
            tape: RefCell::new(Weak::new()),
        })))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_vec(vec![0.0; numel], shape).expect("consistent shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_vec(vec![value; numel], shape).expect("consistent shape")
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(vec![value], &[]).expect("consistent shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.borrow().len()
    }

    /// Borrow of the underlying row-major data.
    pub fn data(&self) -> std::cell::Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Copy of the underlying data.
    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Mutable access to the data. Intended for optimizers and attack steps
    /// operating between tapes; mutating a tensor recorded on a live tape
    /// invalidates that tape's gradients.
    pub fn data_mut(&self) -> std::cell::RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.0.data.borrow();
        debug_assert_eq!(d.len(), 1, "item() on tensor with {} elements", d.len());
        d[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    pub fn set_requires_grad(&self, value: bool) {
        self.0.requires_grad.set(value);
    }

    /// Builder-style `set_requires_grad(true)`.
    pub fn tracked(self) -> Tensor {
        self.set_requires_grad(true);
        self
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// New leaf holding a copy of this tensor's current values; never tracks
    /// gradients and carries no tape history.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(self.to_vec(), &self.0.shape).expect("consistent shape")
    }

    fn needs_grad(&self) -> bool {
        self.0.requires_grad.get() || self.0.interior.get()
    }

    /// Accumulate `delta` into this tensor's gradient (`+=` semantics).
    fn accumulate_grad(&self, delta: &[f64]) {
        if !self.needs_grad() {
            return;
        }
        let mut g = self.0.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += *d;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    /// Replays the tape that produced this scalar, accumulating gradients
    /// into every reachable leaf with `requires_grad`. Consumes the tape:
    /// a second call on the same tape errors.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss {
                elements: self.numel(),
            });
        }
        let tape = self.0.tape.borrow().upgrade().ok_or(Error::NoTape)?;
        if tape.replayed.get() {
            return Err(Error::NoTape);
        }
        tape.replayed.set(true);
        {
            let mut g = self.0.grad.borrow_mut();
            match g.as_mut() {
                Some(buf) => buf[0] += 1.0,
                None => *g = Some(vec![1.0]),
            }
        }
        let entries = tape.entries.take();
        for entry in entries.iter().rev() {
            entry();
        }
        Ok(())
    }
}

type BackwardFn = Box<dyn Fn()>;

struct TapeInner {
    entries: RefCell<Vec<BackwardFn>>,
    replayed: Cell<bool>,
}

/// Ordered record of executed ops with their backward rules.
pub struct Tape {
    inner: Rc<TapeInner>,
}

thread_local! {
    static TAPE_STACK: RefCell<Vec<Rc<TapeInner>>> = const { RefCell::new(Vec::new()) };
}

struct StackGuard;

impl Drop for StackGuard {
    fn drop(&mut self) {
        TAPE_STACK.with(|s| {
            s.borrow_mut().pop();
        });
    }
}

impl Tape {
    /// Runs `f` with a fresh tape active; ops executed inside record their
    /// backward rules on it. Scopes nest: only the innermost tape records.
    pub fn scope<R>(f: impl FnOnce() -> R) -> R {
        let inner = Rc::new(TapeInner {
            entries: RefCell::new(Vec::new()),
            replayed: Cell::new(false),
        });
        TAPE_STACK.with(|s| s.borrow_mut().push(inner));
        let _guard = StackGuard;
        f()
    }

    pub(crate) fn active() -> Option<Rc<TapeInner>> {
        TAPE_STACK.with(|s| s.borrow().last().cloned())
    }
}

/// Marks `out` as produced on the active tape (if any) and records its
/// backward rule.
fn attach(out: &Tensor, backward: impl Fn() + 'static) {
    if let Some(tape) = Tape::active() {
        out.0.interior.set(true);
        *out.0.tape.borrow_mut() = Rc::downgrade(&tape);
        tape.entries.borrow_mut().push(Box::new(backward));
    }
}

/// Reads the output gradient for a backward rule; `None` means the tensor
/// did not contribute to the loss.
fn out_grad(t: &Tensor) -> Option<Vec<f64>> {
    t.0.grad.borrow().clone()
}

#[cfg(debug_assertions)]
fn debug_check_finite(op: &'static str, out: &Tensor) {
    let d = out.0.data.borrow();
    for (i, v) in d.iter().enumerate() {
        assert!(
            v.is_finite(),
            "non-finite output of {op} at flat index {i}: {v}"
        );
    }
}

#[cfg(not(debug_assertions))]
fn debug_check_finite(_op: &'static str, _out: &Tensor) {}
