use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense 2-D parameter with a same-shape gradient accumulator.
///
/// Vectors are stored as single-column tensors. Layout is row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamTensor {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    #[serde(skip, default)]
    grad: Vec<f64>,
}

impl ParamTensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; rows * cols], grad: vec![0.0; rows * cols] }
    }

    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "expected {}x{}={} values, got {}",
                rows,
                cols,
                rows * cols,
                values.len()
            )));
        }
        let grad = vec![0.0; values.len()];
        Ok(Self { rows, cols, values, grad })
    }

    /// Fill with uniform values in `[-a, a]` where `a = gain * sqrt(3 / fan_in)`.
    ///
    /// Matches the variance of an orthogonal init with the same gain.
    pub fn init_scaled_uniform(&mut self, gain: f64, rng: &mut impl rand::Rng) {
        let fan_in = self.cols.max(1) as f64;
        let a = gain * (3.0 / fan_in).sqrt();
        for v in &mut self.values {
            *v = rng.random_range(-a..=a);
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn clear_grad(&mut self) {
        // Deserialized tensors come back with an empty accumulator.
        if self.grad.len() != self.values.len() {
            self.grad = vec![0.0; self.values.len()];
        } else {
            self.grad.fill(0.0);
        }
    }

    /// Ensure the gradient accumulator exists (after deserialization).
    pub fn ensure_grad(&mut self) {
        if self.grad.len() != self.values.len() {
            self.grad = vec![0.0; self.values.len()];
        }
    }

    pub fn grad_sq_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum()
    }

    pub fn scale_grad(&mut self, s: f64) {
        for g in &mut self.grad {
            *g *= s;
        }
    }

    /// `out = W x`
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.values[r * self.cols..(r + 1) * self.cols];
            *o = row.iter().zip(x).map(|(w, xi)| w * xi).sum();
        }
    }

    /// `out += W^T y`
    pub fn matvec_transpose_add(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, yr) in y.iter().enumerate() {
            let row = &self.values[r * self.cols..(r + 1) * self.cols];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * yr;
            }
        }
    }

    /// `grad += dy x^T`
    pub fn add_outer_to_grad(&mut self, dy: &[f64], x: &[f64]) {
        debug_assert_eq!(dy.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (r, dyr) in dy.iter().enumerate() {
            let row = &mut self.grad[r * self.cols..(r + 1) * self.cols];
            for (g, xi) in row.iter_mut().zip(x) {
                *g += dyr * xi;
            }
        }
    }

    /// `grad += dy` (column-vector tensors only).
    pub fn add_to_grad(&mut self, dy: &[f64]) {
        debug_assert_eq!(dy.len(), self.grad.len());
        for (g, d) in self.grad.iter_mut().zip(dy) {
            *g += d;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_transpose() {
        let w = ParamTensor::from_values(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut y = vec![0.0; 2];
        w.matvec(&[1.0, 0.0, -1.0], &mut y);
        assert_eq!(y, vec![-2.0, -2.0]);

        let mut xt = vec![0.0; 3];
        w.matvec_transpose_add(&[1.0, 1.0], &mut xt);
        assert_eq!(xt, vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn outer_product_accumulates() {
        let mut w = ParamTensor::zeros(2, 2);
        w.add_outer_to_grad(&[1.0, 2.0], &[3.0, 4.0]);
        w.add_outer_to_grad(&[1.0, 0.0], &[1.0, 1.0]);
        assert_eq!(w.grad(), &[4.0, 5.0, 6.0, 8.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(ParamTensor::from_values(2, 2, vec![0.0; 3]).is_err());
    }
}
