use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered, named trainable tensors. Indices are stable for the lifetime of
/// the store, so optimizer state can be kept in parallel vectors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.entries.push((name.into(), tensor.with_requires_grad(true)));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    pub fn get(&self, index: usize) -> &Tensor<T> {
        &self.entries[index].1
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.entries[index].1
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().for_each(Tensor::zero_grad);
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Running batch-norm statistics, tracked outside the gradient path.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// Exponential moving average with the unbiased batch variance.
    pub fn update(&mut self, stats: &crate::tensor::BatchStats<T>, momentum: f64) {
        let m = T::lit(momentum);
        let keep = T::one() - m;
        let n = stats.count as f64;
        let unbias = T::lit(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        for c in 0..self.mean.len() {
            self.mean[c] = keep * self.mean[c] + m * stats.mean[c];
            self.var[c] = keep * self.var[c] + m * stats.var[c] * unbias;
        }
    }
}
