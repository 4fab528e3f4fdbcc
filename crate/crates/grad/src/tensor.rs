//! Dense row-major tensors.

use crate::error::{GradError, Result};
use crate::scalar::Real;

/// Dense real tensor stored row-major.
///
/// `shape.iter().product() == data.len()` always holds. Every dimension is
/// positive except the leading (batch) dimension, which may be zero for empty
/// batches.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Real = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Real> Tensor<S> {
    /// Builds a tensor from caller-supplied data, rejecting non-finite
    /// entries and shape/length disagreement.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(GradError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        if shape.iter().skip(1).any(|&d| d == 0) {
            return Err(GradError::ZeroDimension { shape });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(GradError::NonFiniteInput { index });
        }
        Ok(Self { shape, data })
    }

    /// Same as [`Tensor::new`] without the finiteness scan; used for values
    /// produced internally.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// One-dimensional tensor.
    pub fn vector(data: Vec<S>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// One-hot rows of width `n_classes`.
    pub fn one_hot(labels: &[usize], n_classes: usize) -> Self {
        let mut data = vec![S::zero(); labels.len() * n_classes];
        for (i, &l) in labels.iter().enumerate() {
            data[i * n_classes + l] = S::one();
        }
        Self::from_raw(vec![labels.len(), n_classes], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per leading-dimension slice.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[S] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let n = self.row_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(GradError::LengthMismatch {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<S>]) -> Result<Self> {
        let first = items.first().ok_or(GradError::EmptyStack)?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(GradError::StackShape {
                    expected: first.shape.clone(),
                    found: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::from_raw(shape, data))
    }

    /// Extracts leading-axis slice `i` as its own tensor.
    pub fn index_batch(&self, i: usize) -> Self {
        Self::from_raw(self.shape[1..].to_vec(), self.row(i).to_vec())
    }

    /// Gathers leading-axis slices.
    pub fn select_batch(&self, indices: &[usize]) -> Self {
        let n = self.row_len();
        let mut data = Vec::with_capacity(n * indices.len());
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::from_raw(shape, data)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self::from_raw(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: S, other: &Self) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> S {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn norm_l2(&self) -> S {
        norm_l2(&self.data)
    }

    pub fn max_abs(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry of each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.batch()).map(|i| argmax(self.row(i))).collect()
    }
}

/// Euclidean norm of a slice.
pub fn norm_l2<S: Real>(v: &[S]) -> S {
    v.iter().map(|&x| x * x).sum::<S>().sqrt()
}

/// Position of the maximum; ties resolve to the lowest index.
pub fn argmax<S: Real>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_bad_length() {
        assert!(matches!(
            Tensor::<f64>::new(vec![2], vec![1.0, f64::NAN]),
            Err(GradError::NonFiniteInput { index: 1 })
        ));
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 3], vec![]).is_ok());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0f32, 0.0]), 0);
    }

    #[test]
    fn stack_and_select() {
        let a = Tensor::<f64>::vector(vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::vector(vec![3.0, 4.0]).unwrap();
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.select_batch(&[1]).data(), &[3.0, 4.0]);
        assert_eq!(s.index_batch(0), a);
    }
}
