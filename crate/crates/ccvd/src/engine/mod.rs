//! Two-mode tensor engine.
//!
//! Model math is written once, generic over [`Engine`]. The [`EagerEngine`]
//! evaluates immediately and is used for sampling and evaluation; the
//! [`TapeEngine`] records the computation so gradients can be pulled out with
//! reverse-mode accumulation. Both call the same kernels, so values agree
//! bitwise between modes.

pub mod eager;
pub mod kernels;
pub mod tape;

pub use eager::EagerEngine;
pub use tape::{Gradients, TapeEngine, Var};

use ndarray::Array2;

/// Operations the model forward pass is written against.
///
/// All tensors are dense 2-D `f64` matrices; videos and feature maps are kept
/// flattened to `[rows, channels]` with explicit row indexing.
pub trait Engine {
    type T: Clone;

    /// Wrap a value that never receives gradients.
    fn constant(&self, v: Array2<f64>) -> Self::T;
    /// Materialize the value of a tensor.
    fn value(&self, t: &Self::T) -> Array2<f64>;
    fn dims(&self, t: &Self::T) -> (usize, usize);

    fn add(&self, a: &Self::T, b: &Self::T) -> Self::T;
    fn sub(&self, a: &Self::T, b: &Self::T) -> Self::T;
    fn mul(&self, a: &Self::T, b: &Self::T) -> Self::T;
    fn scale(&self, a: &Self::T, k: f64) -> Self::T;
    fn matmul(&self, a: &Self::T, b: &Self::T) -> Self::T;
    fn transpose(&self, a: &Self::T) -> Self::T;
    fn sigmoid(&self, a: &Self::T) -> Self::T;
    fn softmax_rows(&self, a: &Self::T) -> Self::T;
    fn select_rows(&self, a: &Self::T, idx: &[usize]) -> Self::T;
    fn concat_rows(&self, parts: &[Self::T]) -> Self::T;
    /// Sum of all entries as a `[1, 1]` tensor.
    fn sum_all(&self, a: &Self::T) -> Self::T;
    fn abs(&self, a: &Self::T) -> Self::T;

    fn scalar(&self, t: &Self::T) -> f64 {
        let v = self.value(t);
        assert_eq!(v.dim(), (1, 1), "scalar() on non-scalar tensor");
        v[[0, 0]]
    }

    /// Mean of squared differences over all entries.
    fn mean_sq_diff(&self, a: &Self::T, b: &Self::T) -> Self::T {
        let (r, c) = self.dims(a);
        let d = self.sub(a, b);
        let sq = self.mul(&d, &d);
        let s = self.sum_all(&sq);
        self.scale(&s, 1.0 / (r * c) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fixture() -> (Array2<f64>, Array2<f64>) {
        (
            array![[0.3, -1.2], [2.0, 0.5], [-0.7, 1.1]],
            array![[1.5, 0.2], [-0.4, 0.9], [0.1, -2.0]],
        )
    }

    /// Every op must produce identical bytes through both engines.
    #[test]
    fn eager_and_tape_agree_bitwise() {
        let (a, b) = fixture();
        let eg = EagerEngine;
        let tp = TapeEngine::new();

        let (ea, eb) = (eg.constant(a.clone()), eg.constant(b.clone()));
        let (ta, tb) = (tp.leaf(a.clone()), tp.leaf(b.clone()));

        let pairs: Vec<(Array2<f64>, Array2<f64>)> = vec![
            (eg.value(&eg.add(&ea, &eb)), tp.value(&tp.add(&ta, &tb))),
            (eg.value(&eg.mul(&ea, &eb)), tp.value(&tp.mul(&ta, &tb))),
            (
                eg.value(&eg.matmul(&ea, &eg.transpose(&eb))),
                tp.value(&tp.matmul(&ta, &tp.transpose(&tb))),
            ),
            (
                eg.value(&eg.softmax_rows(&ea)),
                tp.value(&tp.softmax_rows(&ta)),
            ),
            (eg.value(&eg.sigmoid(&ea)), tp.value(&tp.sigmoid(&ta))),
            (
                eg.value(&eg.select_rows(&ea, &[2, 0, 0])),
                tp.value(&tp.select_rows(&ta, &[2, 0, 0])),
            ),
        ];
        for (x, y) in pairs {
            assert_eq!(x.as_slice().unwrap(), y.as_slice().unwrap());
        }
    }
}
