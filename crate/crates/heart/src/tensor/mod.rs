//! Dense tensors, a seeded PRNG, and a reverse-mode autodiff graph.
//!
//! Everything downstream (attention blocks, the encoder-decoder model,
//! training) is expressed through [`Graph`] operations on [`Tensor`]
//! values. Tensors are immutable once created; a graph is built eagerly
//! per forward pass and consumed by [`Graph::backward`].

mod graph;
mod rng;

pub use graph::{Gradients, Graph, Mode, Var};
pub use rng::{component_seed, Rng, RNG_ALGORITHM};

use crate::error::{Error, Result};

/// Dense rank-N array of 64-bit floats in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Whether gradients should flow into this tensor when it is used
    /// as a graph leaf.
    pub requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data.
    ///
    /// Rejects empty extents, length mismatches, and non-finite
    /// elements.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if let Some(x) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::Data(format!("non-finite element {x} in tensor")));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        })
    }

    /// Zero-filled tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
        }
    }

    /// Tensor filled with a constant.
    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
        }
    }

    /// Rank-0-like scalar stored as shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    /// 1-D tensor from a slice.
    pub fn vector(data: &[f64]) -> Self {
        Self {
            shape: vec![data.len()],
            data: data.to_vec(),
            requires_grad: false,
        }
    }

    /// Row-major matrix from nested rows; all rows must have equal length.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("ragged matrix rows".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(&[m, n], data)
    }

    /// Identity matrix of size `n`.
    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Marks the tensor as a gradient-carrying leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Flat index for `[i, j]` in a rank-2 tensor (no bounds checks
    /// beyond debug assertions).
    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Flat index for `[i, j, k]` in a rank-3 tensor.
    #[inline]
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    /// Elementwise maximum absolute difference against another tensor.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_of_shape_matches_len() {
        let t = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn rejects_length_mismatch() {
        assert!(matches!(
            Tensor::new(&[2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Tensor::new(&[2], vec![1.0, f64::NAN]),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            Tensor::new(&[1], vec![f64::INFINITY]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn rejects_zero_extent() {
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn identity_diagonal() {
        let id = Tensor::identity(3);
        assert_eq!(id.at2(0, 0), 1.0);
        assert_eq!(id.at2(1, 0), 0.0);
        assert_eq!(id.at2(2, 2), 1.0);
    }
}
