//! Define-by-run tape and the reverse pass.

use std::cell::{Cell, Ref, RefCell};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Backward rule of one recorded op: receives the output gradient, read-only
/// access to all recorded forward values, and the gradient buffer to
/// accumulate into.
pub(crate) type BackFn = Box<dyn Fn(&[f64], &[Node], &mut GradBuffer)>;

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) needs_grad: bool,
    pub(crate) back: Option<BackFn>,
}

/// An ordered record of executed primitive ops.
///
/// Inputs of every op precede it on the tape (topological order), so the
/// backward pass is a single reverse sweep that visits each op exactly once.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    /// Set when a backward pass has consumed the tape; a tape is rebuilt per
    /// forward pass rather than reused.
    used: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            used: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Places a tensor on the tape as a leaf. Its gradient is accumulated by
    /// [`Tape::backward`] iff the tensor was marked [`Tensor::with_grad`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let needs = value.requires_grad();
        self.push_unchecked(value, needs, None)
    }

    /// Places a non-differentiable constant on the tape.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, false, None)
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    /// Index the next pushed node will get; used by ops whose backward rule
    /// reads their own output value.
    pub(crate) fn next_index(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub(crate) fn push_unchecked(&self, value: Tensor, needs_grad: bool, back: Option<BackFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node {
            value,
            needs_grad,
            back,
        });
        Var { tape: self, idx }
    }

    /// Records an op output, rejecting non-finite values: overflow is an
    /// error, not a silent value.
    pub(crate) fn push(
        &self,
        op: &'static str,
        value: Tensor,
        needs_grad: bool,
        back: Option<BackFn>,
    ) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        Ok(self.push_unchecked(value, needs_grad, back))
    }

    /// Reverse sweep from a scalar loss. Returns the accumulated gradient of
    /// every `requires_grad` leaf (and of intermediates, for diagnostics).
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::invalid("backward", "empty tape"));
        }
        let loss_node = &nodes[loss.idx];
        if !loss_node.value.is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss_node.value.shape()),
            ));
        }
        self.used.set(true);

        let mut buf = GradBuffer {
            slots: vec![None; nodes.len()],
        };
        buf.slot(loss.idx, 1)[0] = 1.0;

        for i in (0..=loss.idx).rev() {
            let node = &nodes[i];
            if !node.needs_grad || node.back.is_none() {
                continue;
            }
            // Every consumer of node i sits later on the tape and has already
            // run, so the gradient here is complete. Take it out to appease
            // the borrow on `buf`, then put it back for inspection.
            let Some(g) = buf.slots[i].take() else { continue };
            node.back.as_ref().unwrap()(&g, &nodes, &mut buf);
            buf.slots[i] = Some(g);
        }

        let grads = buf
            .slots
            .into_iter()
            .enumerate()
            .map(|(i, slot)| {
                slot.map(|data| {
                    Tensor::from_vec(nodes[i].value.shape().to_vec(), data)
                        .expect("gradient shape matches value shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// A handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("idx", &self.idx).finish()
    }
}

impl<'t> Var<'t> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.idx].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clones the forward value out of the tape.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn scalar_value(&self) -> Result<f64> {
        self.tape.nodes.borrow()[self.idx].value.scalar_value()
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.idx].needs_grad
    }

    pub(crate) fn same_tape(&self, other: &Var<'_>) -> bool {
        std::ptr::eq(self.tape, other.tape)
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`, if any flowed there.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.idx).and_then(|g| g.as_ref())
    }
}

/// Per-node gradient accumulator used during the reverse sweep.
pub(crate) struct GradBuffer {
    slots: Vec<Option<Vec<f64>>>,
}

impl GradBuffer {
    /// Zero-initialized gradient slot for node `idx`.
    pub(crate) fn slot(&mut self, idx: usize, len: usize) -> &mut [f64] {
        self.slots[idx].get_or_insert_with(|| vec![0.0; len])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_rejects_empty_tape() {
        let tape = Tape::new();
        let other = Tape::new();
        let x = other.leaf(Tensor::scalar(1.0));
        // A var from another tape with index 0 on an empty tape errors.
        let stolen = Var { tape: &tape, idx: x.idx };
        assert!(tape.backward(stolen).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0).with_grad());
        let c = tape.constant(Tensor::scalar(3.0));
        let y = x.mul(c).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0]);
        assert!(grads.get(c).is_none());
    }
}
