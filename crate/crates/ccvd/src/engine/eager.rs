//! Immediate-evaluation engine used everywhere gradients are not needed.

use ndarray::Array2;

use super::{kernels, Engine};

#[derive(Debug, Clone, Copy, Default)]
pub struct EagerEngine;

impl Engine for EagerEngine {
    type T = Array2<f64>;

    fn constant(&self, v: Array2<f64>) -> Self::T {
        v
    }

    fn value(&self, t: &Self::T) -> Array2<f64> {
        t.clone()
    }

    fn dims(&self, t: &Self::T) -> (usize, usize) {
        t.dim()
    }

    fn add(&self, a: &Self::T, b: &Self::T) -> Self::T {
        kernels::add(a, b)
    }

    fn sub(&self, a: &Self::T, b: &Self::T) -> Self::T {
        kernels::sub(a, b)
    }

    fn mul(&self, a: &Self::T, b: &Self::T) -> Self::T {
        kernels::mul(a, b)
    }

    fn scale(&self, a: &Self::T, k: f64) -> Self::T {
        kernels::scale(a, k)
    }

    fn matmul(&self, a: &Self::T, b: &Self::T) -> Self::T {
        kernels::matmul(a, b)
    }

    fn transpose(&self, a: &Self::T) -> Self::T {
        kernels::transpose(a)
    }

    fn sigmoid(&self, a: &Self::T) -> Self::T {
        kernels::sigmoid(a)
    }

    fn softmax_rows(&self, a: &Self::T) -> Self::T {
        kernels::softmax_rows(a)
    }

    fn select_rows(&self, a: &Self::T, idx: &[usize]) -> Self::T {
        kernels::select_rows(a, idx)
    }

    fn concat_rows(&self, parts: &[Self::T]) -> Self::T {
        let refs: Vec<&Array2<f64>> = parts.iter().collect();
        kernels::concat_rows(&refs)
    }

    fn sum_all(&self, a: &Self::T) -> Self::T {
        Array2::from_elem((1, 1), kernels::sum_all(a))
    }

    fn abs(&self, a: &Self::T) -> Self::T {
        kernels::abs(a)
    }
}
