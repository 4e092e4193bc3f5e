//! Dense row-major tensors. Shapes are plain `Vec<usize>`; rank is whatever
//! the op expects, there is no broadcasting.

use crate::real::Real;

/// Number of elements implied by a shape. The empty shape is a scalar.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R: Real> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    /// Build from explicit shape and data; panics if they disagree.
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "shape {:?} implies {} elements, got {}",
            shape,
            numel(&shape),
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self { shape, data: vec![R::ZERO; n] }
    }

    pub fn scalar(v: R) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn from_vec(data: Vec<R>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    /// Convenience for tests: lift an `f64` slice into `R`.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Self {
        Self::new(shape, data.iter().map(|&x| R::from_f64(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> R {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same data viewed under a different shape (must preserve element count).
    pub fn reshaped(&self, shape: Vec<usize>) -> Self {
        assert_eq!(numel(&shape), self.data.len(), "reshape {:?} -> {:?}", self.shape, shape);
        Self { shape, data: self.data.clone() }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, R> {
        self.data.iter()
    }
}
