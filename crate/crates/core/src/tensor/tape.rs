//! Append-only tape. Nodes are created in topological order, so a single
//! reverse sweep visits every node after all of its consumers.

use super::ops::Op;
use super::Tensor;
use crate::error::{NfsError, Result};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) tensor: Tensor<T>,
    pub(crate) op: Op<T>,
}

pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf)
    }

    /// Records a trainable leaf holding a copy of `tensor`'s values.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        let copy = Tensor::from_vec(tensor.shape(), tensor.values().to_vec())
            .expect("shape already validated")
            .with_requires_grad(true);
        self.push(copy, Op::Leaf)
    }

    pub(crate) fn push(&mut self, tensor: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    pub fn tensor(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].tensor
    }

    pub fn value(&self, var: Var) -> &[T] {
        self.nodes[var.0].tensor.values()
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].tensor.shape()
    }

    pub fn grad(&self, var: Var) -> &[T] {
        self.nodes[var.0].tensor.grad()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].tensor.requires_grad()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.tensor.zero_grad();
        }
    }

    /// Adds `var`'s gradient into `target.grad`.
    pub fn accumulate_into(&self, var: Var, target: &mut Tensor<T>) -> Result<()> {
        let src = self.tensor(var);
        if src.shape() != target.shape() {
            return Err(NfsError::shape("accumulate_into", "shape", target.shape(), src.shape()));
        }
        for (t, &g) in target.grad_mut().iter_mut().zip(src.grad()) {
            *t += g;
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into every
    /// node that requires grad until [`Tape::zero_grad`] is called.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(NfsError::Detached);
        }
        let loss_tensor = &self.nodes[loss.0].tensor;
        if !loss_tensor.is_scalar() {
            return Err(NfsError::NonScalarLoss(loss_tensor.shape().to_vec()));
        }
        if !loss_tensor.requires_grad() {
            return Ok(());
        }

        let mut scratch: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        scratch[loss.0] = Some(vec![T::one()]);
        let mut finished: Vec<(usize, Vec<T>)> = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(out_grad) = scratch[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            node.op.backward(&self.nodes, &node.tensor, &out_grad, &mut scratch);
            finished.push((idx, out_grad));
        }

        for (idx, grad) in finished {
            for (g, d) in self.nodes[idx].tensor.grad_mut().iter_mut().zip(grad) {
                *g += d;
            }
        }
        Ok(())
    }
}

/// Adds `delta` into the scratch gradient of `var`, allocating on first use.
pub(crate) fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    scratch: &mut [Option<Vec<T>>],
    var: Var,
    delta: impl FnOnce(&mut [T]),
) {
    if !nodes[var.0].tensor.requires_grad() {
        return;
    }
    let slot = scratch[var.0].get_or_insert_with(|| vec![T::zero(); nodes[var.0].tensor.numel()]);
    delta(slot);
}
