//! Dense row-major tensors of `f64`.

use crate::error::{Error, Result};

/// A dense tensor with row-major layout. Rank 0 (`shape == []`) is a scalar.
///
/// Invariants, enforced at construction: the shape product equals the data
/// length, the element count is at least one, and every element is finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating shape/data agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor: shape {:?} implies {} elements but {} were provided",
                shape,
                numel,
                data.len()
            )));
        }
        if numel == 0 {
            return Err(Error::InvalidArgument(format!(
                "tensor: empty shape {shape:?} is not supported"
            )));
        }
        let t = Tensor { shape, data };
        t.ensure_finite("tensor")?;
        Ok(t)
    }

    /// Builds without the finiteness scan. Callers are expected to run
    /// [`Tensor::ensure_finite`] under the producing op's name.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    /// A rank-0 scalar.
    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// A tensor of zeros. Panics on an empty shape product (programming error).
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::filled(shape, 0.0)
    }

    /// A tensor with every element set to `value`.
    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        assert!(numel > 0, "filled: empty shape {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// The n×n identity matrix.
    pub fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// True when the tensor holds exactly one element, regardless of rank.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element tensor.
    ///
    /// Panics if the tensor holds more than one element.
    pub fn item(&self) -> f64 {
        assert!(
            self.is_scalar(),
            "item: tensor with shape {:?} is not a scalar",
            self.shape
        );
        self.data[0]
    }

    /// Element access for rank-2 tensors.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2, "at: rank-2 access on {:?}", self.shape);
        self.data[row * self.shape[1] + col]
    }

    /// Verifies every element is finite, blaming `op` otherwise.
    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let t = Tensor::scalar(3.0);
        assert_eq!(t.shape(), &[] as &[usize]);
        assert_eq!(t.data(), &[3.0]);
        assert!(t.is_scalar());
        assert_eq!(t.item(), 3.0);
    }

    #[test]
    fn new_rejects_shape_data_disagreement() {
        let err = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(err.to_string().contains("4 elements"));
    }

    #[test]
    fn new_rejects_non_finite_values() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "tensor" }));
    }

    #[test]
    fn new_rejects_empty_tensors() {
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![3, 0], vec![]).is_err());
    }

    #[test]
    fn eye_is_the_identity() {
        let i3 = Tensor::eye(3);
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(i3.at(r, c), if r == c { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn zeros_matches_requested_shape() {
        let t = Tensor::zeros(&[5, 4]);
        assert_eq!(t.shape(), &[5, 4]);
        assert_eq!(t.numel(), 20);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}
