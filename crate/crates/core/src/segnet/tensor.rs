use ndarray::Array4;

use crate::Scalar;

/// Dense `(batch, channels, height, width)` array with a same-shape
/// gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    data: Array4<T>,
    grad: Array4<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(data: Array4<T>) -> Self {
        let data = data.as_standard_layout().into_owned();
        let grad = Array4::zeros(data.raw_dim());
        Self { data, grad }
    }

    pub fn zeros(shape: (usize, usize, usize, usize)) -> Self {
        Self::new(Array4::zeros(shape))
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array4<T> {
        &self.data
    }

    pub fn grad(&self) -> &Array4<T> {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Array4<T> {
        &mut self.grad
    }

    pub fn into_data(self) -> Array4<T> {
        self.data
    }

    /// Add `g` into the gradient buffer.
    ///
    /// # Panics
    /// If `g` has a different shape.
    pub fn accumulate_grad(&mut self, g: &Array4<T>) {
        assert_eq!(g.dim(), self.grad.dim(), "gradient shape mismatch");
        self.grad += g;
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite()) && self.grad.iter().all(|v| v.is_finite())
    }
}
