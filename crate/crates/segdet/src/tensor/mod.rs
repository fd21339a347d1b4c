//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The module is built around two types:
//!
//! * [`Tensor`] — a reference-counted handle to a dense, row-major `f64`
//!   buffer plus its shape. Leaf tensors created with [`Tensor::param`]
//!   carry a persistent gradient buffer; everything else is either a
//!   constant or an intermediate value produced by an operation.
//! * [`Tape`] — a Wengert list. Every differentiable operation executed
//!   through a recording tape appends one record holding handles to its
//!   input and output tensors plus whatever it cached for the backward
//!   pass. [`Tape::backward`] replays those records in exact reverse
//!   execution order, accumulating gradients.
//!
//! Conventions used throughout:
//!
//! * Image batches are `[B, C, H, W]`, row-major, so the innermost stride
//!   is along `W`.
//! * There is no implicit broadcasting. Binary elementwise operations
//!   require identical shapes; the only scalar forms are the explicit
//!   `*_scalar` operations.
//! * Gradients accumulate. Nothing in this module ever zeroes a leaf
//!   gradient implicitly; the optimizer does that explicitly after it has
//!   consumed them. Calling backward twice therefore adds the gradients of
//!   both passes, which is intended.
//! * One tape is single-threaded. Distinct tapes (and the models recorded
//!   on them) are independent and may live on different threads.
//!
//! Clearing a tape drops all recorded operations and bumps an epoch
//! counter; a later `backward` through an output recorded before the clear
//! fails with a stale-tape error instead of silently producing garbage.

mod op;
mod ops;

pub use ops::{conv2d_output_extent, logit, sigmoid, RunningStats};

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use op::Op;

/// Whether a forward pass uses batch statistics (training) or frozen
/// running statistics (inference). Only batch normalization cares.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Identifies the op record that produced a tensor: which tape, which
/// clear-epoch of that tape, and the record index within the epoch.
#[derive(Clone, Copy, Debug)]
struct NodeRef {
    tape_id: u64,
    epoch: u64,
    index: usize,
}

struct TensorInner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    /// Persistent gradient buffer; present iff this is a `param` leaf.
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    /// Set iff this tensor is the output of a recorded operation.
    node: Option<NodeRef>,
}

/// Handle to a dense f64 tensor. Cloning is cheap (reference count bump)
/// and both handles see the same buffer.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::config("tensor shape must have at least one extent"));
    }
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(Error::config(format!(
                "tensor extents must be positive, got shape {shape:?}"
            )));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::config(format!("tensor shape {shape:?} overflows usize")))?;
    }
    Ok(n)
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<NodeRef>) -> Tensor {
        // The gradient buffer appears lazily on the first backward pass that
        // reaches this tensor, so `grad()` distinguishes "not in any graph
        // yet" (None) from "participated with zero gradient" (Some).
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                node,
            }),
        }
    }

    /// Constant tensor (no gradient is ever requested for it).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n = checked_numel(shape)?;
        if n != data.len() {
            return Err(Error::config(format!(
                "shape {shape:?} implies {n} elements but {} were provided",
                data.len()
            )));
        }
        Ok(Tensor::new(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf: carries a persistent, explicitly-zeroed gradient.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n = checked_numel(shape)?;
        if n != data.len() {
            return Err(Error::config(format!(
                "shape {shape:?} implies {n} elements but {} were provided",
                data.len()
            )));
        }
        Ok(Tensor::new(shape.to_vec(), data, true, None))
    }

    /// Constant tensor filled with `value`.
    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        let n = checked_numel(shape)?;
        Ok(Tensor::new(shape.to_vec(), vec![value; n], false, None))
    }

    /// Constant tensor of zeros.
    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Tensor::full(shape, 0.0)
    }

    /// Single-element constant with shape `[1]`.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(vec![1], vec![value], false, None)
    }

    fn with_node(shape: Vec<usize>, data: Vec<f64>, node: NodeRef) -> Tensor {
        Tensor::new(shape, data, false, Some(node))
    }

    fn constant(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data, false, None)
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

    /// Short-lived shared borrow of the value buffer.
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    /// Copy of the value buffer.
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    ///
    /// Panics if the tensor has more than one element; this is a test and
    /// loss-plumbing convenience, not a reduction.
    pub fn item(&self) -> f64 {
        let data = self.inner.data.borrow();
        assert_eq!(data.len(), 1, "item() called on tensor with {} elements", data.len());
        data[0]
    }

    /// Replace the value buffer (same length required). Used by the
    /// optimizer to apply parameter updates in place.
    pub fn set_data(&self, data: Vec<f64>) {
        let mut cur = self.inner.data.borrow_mut();
        assert_eq!(cur.len(), data.len(), "set_data length mismatch");
        *cur = data;
    }

    /// Apply `f` to the value buffer in place.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// Copy of the accumulated gradient, if this is a `param` leaf.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Reset the gradient buffer to zeros. No-op on non-leaf tensors.
    pub fn zero_grad(&self) {
        if let Some(g) = self.inner.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Drop the gradient buffer entirely, so `grad()` reads `None` until the
    /// next backward pass reaches this tensor. Optimizers use this to tell
    /// "participated with zero gradient" apart from "not in the graph".
    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Detached constant copy: same values, no gradient history.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.inner.shape.clone(), self.to_vec())
    }

    fn accumulate_grad(&self, contrib: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        let g = slot.get_or_insert_with(|| vec![0.0; contrib.len()]);
        debug_assert_eq!(g.len(), contrib.len());
        for (dst, src) in g.iter_mut().zip(contrib) {
            *dst += src;
        }
    }

    fn node(&self) -> Option<NodeRef> {
        self.inner.node
    }
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

struct Record {
    op: Op,
    output: Tensor,
}

struct TapeInner {
    id: u64,
    epoch: u64,
    recording: bool,
    ops: Vec<Record>,
}

/// Wengert list of executed operations. All tensor operations are methods
/// on `Tape`; see the module docs for recording and clearing semantics.
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// Recording tape for training: operations append backward records.
    pub fn new() -> Tape {
        Tape::with_recording(true)
    }

    /// Non-recording tape for inference: operations compute values only,
    /// so intermediates are freed as soon as the caller drops them.
    pub fn inference() -> Tape {
        Tape::with_recording(false)
    }

    fn with_recording(recording: bool) -> Tape {
        Tape {
            inner: RefCell::new(TapeInner {
                id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
                epoch: 0,
                recording,
                ops: Vec::new(),
            }),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.inner.borrow().recording
    }

    /// Number of recorded operations in the current epoch.
    pub fn len(&self) -> usize {
        self.inner.borrow().ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop every recorded operation (releasing the intermediate tensors
    /// they kept alive) and invalidate outputs recorded so far: a later
    /// `backward` through them reports a stale-tape error.
    pub fn clear(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.ops.clear();
        inner.epoch += 1;
    }

    /// True if the tensor participates in gradient flow on this tape:
    /// either a trainable leaf or an output recorded in the current epoch.
    fn tracked(&self, t: &Tensor) -> bool {
        if t.requires_grad() {
            return true;
        }
        match t.node() {
            Some(nr) => {
                let inner = self.inner.borrow();
                nr.tape_id == inner.id && nr.epoch == inner.epoch
            }
            None => false,
        }
    }

    /// Finish an operation: wrap `data` in a tensor and, when recording
    /// and at least one input is tracked, append the backward record.
    fn finish(&self, inputs: &[&Tensor], op: impl FnOnce() -> Op, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let record = self.is_recording() && inputs.iter().any(|t| self.tracked(t));
        if !record {
            return Tensor::constant(shape, data);
        }
        let mut inner = self.inner.borrow_mut();
        let node = NodeRef {
            tape_id: inner.id,
            epoch: inner.epoch,
            index: inner.ops.len(),
        };
        let output = Tensor::with_node(shape, data, node);
        inner.ops.push(Record {
            op: op(),
            output: output.clone(),
        });
        output
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Seeds the loss gradient with 1.0 and replays the recorded
    /// operations in reverse execution order. Gradients of trainable
    /// leaves are *added* to their persistent buffers. A loss with no
    /// recorded history is a no-op (its gradient seed still lands if the
    /// loss itself is a trainable leaf).
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let Some(nr) = loss.node() else {
            // Constant loss: nothing upstream of it. A bare trainable leaf
            // used directly as the loss still receives d(loss)/d(leaf)=1.
            if loss.requires_grad() {
                loss.accumulate_grad(&[1.0]);
            }
            return Ok(());
        };
        let inner = self.inner.borrow();
        if nr.tape_id != inner.id {
            return Err(Error::usage("backward: loss was recorded on a different tape"));
        }
        if nr.epoch != inner.epoch {
            return Err(Error::usage(
                "backward: stale tape — the loss was recorded before the last clear()",
            ));
        }
        // Scratch gradient per record output, for this sweep only. Leaf
        // gradients persist on the tensors; intermediate gradients do not
        // survive the sweep, so a repeated backward re-derives them.
        let mut scratch: Vec<Option<Vec<f64>>> = Vec::with_capacity(nr.index + 1);
        scratch.resize_with(nr.index + 1, || None);
        scratch[nr.index] = Some(vec![1.0]);
        for i in (0..=nr.index).rev() {
            let Some(grad_out) = scratch[i].take() else {
                continue;
            };
            let record = &inner.ops[i];
            let mut sink = GradSink {
                tape_id: inner.id,
                epoch: inner.epoch,
                scratch: &mut scratch,
            };
            record.op.backward(&grad_out, &record.output, &mut sink);
        }
        Ok(())
    }
}

/// Routes a gradient contribution to wherever its tensor accumulates:
/// the sweep-local scratch slot for recorded intermediates, the persistent
/// grad buffer for trainable leaves, or nowhere for constants.
struct GradSink<'a> {
    tape_id: u64,
    epoch: u64,
    scratch: &'a mut Vec<Option<Vec<f64>>>,
}

impl GradSink<'_> {
    fn add(&mut self, tensor: &Tensor, contrib: Vec<f64>) {
        match tensor.node() {
            Some(nr) if nr.tape_id == self.tape_id && nr.epoch == self.epoch => {
                match &mut self.scratch[nr.index] {
                    Some(acc) => {
                        for (dst, src) in acc.iter_mut().zip(&contrib) {
                            *dst += src;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            _ => {
                if tensor.requires_grad() {
                    tensor.accumulate_grad(&contrib);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_shape_mismatch() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 0], vec![]).is_err());
        assert!(Tensor::from_vec(&[], vec![]).is_err());
    }

    #[test]
    fn param_grad_appears_on_first_backward_and_clears_to_none() {
        let p = Tensor::param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(p.grad().is_none(), "no graph has reached this parameter yet");
        let c = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        assert!(c.grad().is_none());

        let tape = Tape::new();
        let loss = tape.sum_all(&p);
        tape.backward(&loss).unwrap();
        assert_eq!(p.grad().unwrap(), vec![1.0; 4]);
        p.zero_grad();
        assert_eq!(p.grad().unwrap(), vec![0.0; 4], "zeroing keeps the buffer");
        p.clear_grad();
        assert!(p.grad().is_none(), "clearing drops the buffer");
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let a = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let b = tape.mul(&a, &a).unwrap();
        let err = tape.backward(&b).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn backward_on_cleared_tape_is_stale_error() {
        let tape = Tape::new();
        let a = Tensor::param(&[1], vec![3.0]).unwrap();
        let loss = tape.mul(&a, &a).unwrap();
        tape.clear();
        let err = tape.backward(&loss).unwrap_err();
        assert!(err.to_string().contains("stale"), "unexpected error: {err}");
    }

    #[test]
    fn backward_on_wrong_tape_is_usage_error() {
        let tape_a = Tape::new();
        let tape_b = Tape::new();
        let a = Tensor::param(&[1], vec![3.0]).unwrap();
        let loss = tape_a.mul(&a, &a).unwrap();
        assert!(tape_b.backward(&loss).is_err());
    }

    #[test]
    fn constant_loss_backward_is_noop() {
        let tape = Tape::new();
        let c = Tensor::scalar(5.0);
        tape.backward(&c).unwrap();
        assert!(c.grad().is_none());
    }

    #[test]
    fn leaf_loss_receives_unit_gradient() {
        let tape = Tape::new();
        let p = Tensor::param(&[1], vec![2.0]).unwrap();
        tape.backward(&p).unwrap();
        assert_eq!(p.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        // loss = a^2, d/da = 2a = 6; two sweeps without zeroing add up.
        let tape = Tape::new();
        let a = Tensor::param(&[1], vec![3.0]).unwrap();
        let loss = tape.mul(&a, &a).unwrap();
        tape.backward(&loss).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![12.0]);
        a.zero_grad();
        assert_eq!(a.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::inference();
        let a = Tensor::param(&[1], vec![3.0]).unwrap();
        let b = tape.mul(&a, &a).unwrap();
        assert_eq!(tape.len(), 0);
        assert_eq!(b.item(), 9.0);
    }

    #[test]
    fn same_tensor_twice_in_one_op_accumulates_both_paths() {
        // loss = a * a, gradient must be 2a, not a.
        let tape = Tape::new();
        let a = Tensor::param(&[1], vec![4.0]).unwrap();
        let loss = tape.mul(&a, &a).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![8.0]);
    }

    #[test]
    fn diamond_graph_accumulates_through_both_branches() {
        // loss = (a+a) * a = 2a^2, d/da = 4a.
        let tape = Tape::new();
        let a = Tensor::param(&[1], vec![5.0]).unwrap();
        let s = tape.add(&a, &a).unwrap();
        let loss = tape.mul(&s, &a).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![20.0]);
    }

    #[test]
    fn stale_intermediate_is_treated_as_constant_input() {
        let tape = Tape::new();
        let a = Tensor::param(&[1], vec![2.0]).unwrap();
        let b = tape.mul(&a, &a).unwrap();
        tape.clear();
        // `b` survives as a value, but its history is gone: using it in a
        // fresh epoch must not try to flow gradient through the old graph.
        let c = tape.mul(&b, &b).unwrap();
        tape.backward(&c).unwrap();
        assert!(a.grad().is_none(), "no gradient may flow through the old graph");
        assert_eq!(c.item(), 16.0);
    }
}
