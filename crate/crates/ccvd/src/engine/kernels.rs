//! Raw matrix numerics shared by the eager and tape engines.
//!
//! Both engines route through these functions so that an inference pass and a
//! training-mode forward produce bitwise-identical values.

use ndarray::Array2;

pub fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    assert_eq!(
        a.ncols(),
        b.nrows(),
        "matmul inner dims: {:?} x {:?}",
        a.dim(),
        b.dim()
    );
    a.dot(b)
}

pub fn add(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    assert_eq!(a.dim(), b.dim(), "add shapes");
    a + b
}

pub fn sub(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    assert_eq!(a.dim(), b.dim(), "sub shapes");
    a - b
}

pub fn mul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    assert_eq!(a.dim(), b.dim(), "mul shapes");
    a * b
}

pub fn scale(a: &Array2<f64>, k: f64) -> Array2<f64> {
    a.mapv(|x| x * k)
}

pub fn transpose(a: &Array2<f64>) -> Array2<f64> {
    a.t().to_owned()
}

pub fn sigmoid(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|x| 1.0 / (1.0 + (-x).exp()))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

/// Gather rows of `a` in the order given by `idx`.
pub fn select_rows(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let cols = a.ncols();
    let mut out = Array2::zeros((idx.len(), cols));
    for (k, &i) in idx.iter().enumerate() {
        assert!(i < a.nrows(), "row index {} out of {}", i, a.nrows());
        out.row_mut(k).assign(&a.row(i));
    }
    out
}

pub fn concat_rows(parts: &[&Array2<f64>]) -> Array2<f64> {
    assert!(!parts.is_empty(), "concat_rows of nothing");
    let cols = parts[0].ncols();
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = Array2::zeros((rows, cols));
    let mut at = 0;
    for p in parts {
        assert_eq!(p.ncols(), cols, "concat_rows col mismatch");
        for r in p.rows() {
            out.row_mut(at).assign(&r);
            at += 1;
        }
    }
    out
}

pub fn sum_all(a: &Array2<f64>) -> f64 {
    a.sum()
}

pub fn abs(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(f64::abs)
}
