//! Dense row-major tensors and the reverse-mode tape that differentiates them.

mod checkpoint;
mod ops;
mod tape;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CheckpointEntry, CHECKPOINT_MAGIC};
pub use ops::{ste_backward, BatchStats, BnMode, GateLevel};
pub use tape::{Tape, Var};

use crate::error::{NfsError, Result};
use crate::scalar::Scalar;

/// Dense tensor with an attached gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Vec<T>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], values: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(NfsError::shape("tensor", "shape", "positive dims", shape));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(NfsError::shape("tensor", "element count", numel, values.len()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            grad: vec![T::zero(); values.len()],
            values,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::from_vec(shape, vec![value; numel]).expect("valid shape")
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(&[1], vec![value]).expect("scalar shape")
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        &mut self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn item(&self) -> T {
        self.values[0]
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    /// Same data viewed under a new shape with equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.values.len() {
            return Err(NfsError::shape("reshape", "element count", self.values.len(), numel));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Rows `[start, end)` along the leading dimension.
    pub fn rows(&self, start: usize, end: usize) -> Result<Self> {
        let lead = self.shape[0];
        if start >= end || end > lead {
            return Err(NfsError::shape("rows", "row range", format!("within 0..{lead}"), (start, end)));
        }
        let stride = self.values.len() / lead;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self::from_vec(&shape, self.values[start * stride..end * stride].to_vec())
    }

    /// Concatenation along the leading dimension.
    pub fn concat_rows(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| NfsError::Config("concat of zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut values = Vec::new();
        for part in parts {
            if &part.shape[1..] != tail {
                return Err(NfsError::shape("concat_rows", "trailing dims", tail, &part.shape[1..]));
            }
            rows += part.shape[0];
            values.extend_from_slice(&part.values);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Self::from_vec(&shape, values)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_vec(&self.shape, self.values.iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests;
