//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Every forward operation appends one record (output value, parent ids,
//! backward rule). Records are inherently in topological order, so a
//! single reverse sweep propagates gradients from a scalar loss to every
//! gradient-tracked leaf. A tape belongs to one forward/backward pass and
//! to one thread.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to one value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Backward rule of a recorded operation. Implementations read parent
/// values through the context and accumulate gradient contributions into
/// the parents' buffers.
pub(crate) trait TapeOp<T: Scalar> {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>);
    fn name(&self) -> &'static str;
}

struct Record<T: Scalar> {
    parents: Vec<Var>,
    op: Option<Box<dyn TapeOp<T>>>,
}

pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    records: Vec<Record<T>>,
    /// Per value: does it depend on any gradient-tracked leaf? Maintained
    /// at insertion so forward ops can skip saving backward state on
    /// tapes that will never differentiate them.
    tracks: Vec<bool>,
    /// Populated by [`Tape::backward`]; indexed like `values`. Interior
    /// buffers are dropped as soon as they have been consumed, so after
    /// the sweep only leaf gradients remain.
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), records: Vec::new(), tracks: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Insert a gradient-tracked leaf (parameter or checked input).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.insert(value, Vec::new(), None, true)
    }

    /// Insert a leaf that never receives a gradient (input data, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.insert(value, Vec::new(), None, false)
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        parents: Vec<Var>,
        op: Box<dyn TapeOp<T>>,
    ) -> Var {
        debug_assert!(
            value.data().iter().all(|v| v.is_finite()),
            "non-finite output produced by op {}",
            op.name()
        );
        let tracks = parents.iter().any(|p| self.tracks[p.0]);
        self.insert(value, parents, Some(op), tracks)
    }

    /// Whether any gradient-tracked leaf sits upstream of this value.
    pub(crate) fn tracks(&self, v: Var) -> bool {
        self.tracks[v.0]
    }

    fn insert(
        &mut self,
        value: Tensor<T>,
        parents: Vec<Var>,
        op: Option<Box<dyn TapeOp<T>>>,
        tracks: bool,
    ) -> Var {
        debug_assert!(parents.iter().all(|p| p.0 < self.values.len()));
        self.values.push(value);
        self.records.push(Record { parents, op });
        self.tracks.push(tracks);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    /// Gradient of the most recent [`Tape::backward`] loss with respect to
    /// a tracked leaf. `None` for interior nodes, untracked leaves, and
    /// leaves the loss does not depend on.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse sweep from a scalar loss. Gradients of tracked leaves are
    /// afterwards available through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }

        let n = self.values.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        if self.tracks[loss.0] {
            grads[loss.0] = Some(vec![T::one()]);
        }

        for i in (0..n).rev() {
            if self.records[i].op.is_none() {
                continue; // leaf: leave any accumulated gradient in place
            }
            let Some(out_grad) = grads[i].take() else { continue };
            let record = &self.records[i];
            let mut ctx = BwdCtx {
                values: &self.values,
                needs: &self.tracks,
                grads: &mut grads,
                parents: &record.parents,
                out: i,
                out_grad: &out_grad,
            };
            record.op.as_ref().unwrap().backward(&mut ctx);
        }

        self.grads = grads;
        Ok(())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Context handed to [`TapeOp::backward`].
pub(crate) struct BwdCtx<'a, T: Scalar> {
    values: &'a [Tensor<T>],
    needs: &'a [bool],
    grads: &'a mut Vec<Option<Vec<T>>>,
    parents: &'a [Var],
    out: usize,
    out_grad: &'a [T],
}

impl<'a, T: Scalar> BwdCtx<'a, T> {
    /// n-th parent of the op being differentiated.
    pub fn parent(&self, i: usize) -> Var {
        self.parents[i]
    }

    pub fn parent_count(&self) -> usize {
        self.parents.len()
    }

    pub fn val(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn out_val(&self) -> &Tensor<T> {
        &self.values[self.out]
    }

    pub fn out_grad(&self) -> &[T] {
        self.out_grad
    }

    /// Whether a parent wants a gradient at all; ops should skip the
    /// corresponding work when this is false.
    pub fn needs(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Mutable gradient buffer of a parent, zero-initialized on first use.
    /// Must only be called when [`BwdCtx::needs`] is true.
    pub fn grad_mut(&mut self, v: Var) -> &mut [T] {
        debug_assert!(self.needs[v.0], "grad_mut on a node that needs no gradient");
        let numel = self.values[v.0].numel();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); numel])
    }

    /// Accumulate a dense contribution into a parent's gradient; a no-op
    /// when the parent needs no gradient.
    pub fn add(&mut self, v: Var, contribution: &[T]) {
        if !self.needs[v.0] {
            return;
        }
        let buf = self.grad_mut(v);
        debug_assert_eq!(buf.len(), contribution.len());
        for (b, c) in buf.iter_mut().zip(contribution) {
            *b += *c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![3]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn constant_leaves_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(2.0));
        tape.backward(x).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn tracked_scalar_leaf_gets_unit_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        tape.backward(x).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0]);
    }
}
