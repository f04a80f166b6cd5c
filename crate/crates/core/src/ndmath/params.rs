use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Ordered list of parameter tensors making up one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new(tensors: Vec<Tensor<T>>) -> Self {
        Params { tensors }
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn check_layout(&self, other: &Params<T>, op: &'static str) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::shape(op, &[self.tensors.len()], &[other.tensors.len()]));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::shape(op, a.shape(), b.shape()));
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.tensors.iter().flat_map(|t| t.data().iter())
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.iter().copied().collect()
    }

    /// Rebuilds a parameter set with the layout of `self` from flat values.
    pub fn with_flat(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.numel() {
            return Err(Error::shape("with_flat", &[self.numel()], &[flat.len()]));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let n = t.numel();
            tensors.push(Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(Params { tensors })
    }

    /// `self += other * scale`, elementwise.
    pub fn add_scaled(&mut self, other: &Params<T>, scale: T) -> Result<()> {
        self.check_layout(other, "add_scaled")?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_scaled(b, scale)?;
        }
        Ok(())
    }

    /// Squared Euclidean distance, accumulated in `f64`.
    pub fn distance_sq(&self, other: &Params<T>) -> Result<f64> {
        self.check_layout(other, "distance_sq")?;
        Ok(self
            .iter()
            .zip(other.iter())
            .map(|(&a, &b)| {
                let d = a.to_f64_lossless() - b.to_f64_lossless();
                d * d
            })
            .sum())
    }
}
