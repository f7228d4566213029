//! Latent video tensors.

use ndarray::{Array2, Array4};

use crate::error::{Error, Result};
use crate::rng;

/// Rank-4 latent tensor `[frames, height, width, channels]`.
///
/// Holds clean latents, noise draws, and noise estimations alike. Entries are
/// finite by construction; flattened views use row index
/// `frame * (h * w) + row * w + col`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    data: Array4<f64>,
}

impl LatentVideo {
    /// Validating constructor for data entering from outside.
    pub fn from_array(data: Array4<f64>) -> Result<Self> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "latent video contains non-finite entry {bad}"
            )));
        }
        Ok(Self { data })
    }

    /// Internal arithmetic constructor. Skips the finiteness check so that a
    /// diverging trajectory can be caught where step diagnostics are known.
    pub fn from_array_unchecked(data: Array4<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(shape: (usize, usize, usize, usize)) -> Self {
        Self {
            data: Array4::zeros(shape),
        }
    }

    /// Unit-Gaussian latent from a (seed, stream) pair.
    pub fn standard_normal(shape: (usize, usize, usize, usize), seed: u64, stream: u64) -> Self {
        let mut r = rng::stream_rng(seed, stream);
        Self {
            data: rng::normal_array4(&mut r, shape, 1.0),
        }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn n_frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flatten to `[frames * h * w, channels]`.
    pub fn to_matrix(&self) -> Array2<f64> {
        let (n_v, h, w, c) = self.data.dim();
        let flat: Vec<f64> = self.data.iter().cloned().collect();
        Array2::from_shape_vec((n_v * h * w, c), flat).expect("contiguous layout")
    }

    /// Inverse of [`to_matrix`](Self::to_matrix). Shape-checked only.
    pub fn from_matrix(mat: &Array2<f64>, shape: (usize, usize, usize, usize)) -> Result<Self> {
        let (n_v, h, w, c) = shape;
        if mat.dim() != (n_v * h * w, c) {
            return Err(Error::shape(
                "from_matrix",
                format!("({}, {c})", n_v * h * w),
                format!("{:?}", mat.dim()),
            ));
        }
        let flat: Vec<f64> = mat.iter().cloned().collect();
        let data = Array4::from_shape_vec(shape, flat).expect("length checked");
        Ok(Self::from_array_unchecked(data))
    }

    /// Elementwise combination with another video of identical shape.
    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "zip_with",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        let mut data = self.data.clone();
        data.zip_mut_with(&other.data, |a, &b| *a = f(*a, b));
        Ok(Self::from_array_unchecked(data))
    }
}
