//! Dense row-major tensor. Values are stored in f64; on-disk formats round
//! to f32 at the serialization boundary.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// A tensor of zeros with the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// A tensor filled with one value.
    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Wrap existing data. Errors unless `product(shape) == data.len()`.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// A 1x1 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// A 1xN row matrix.
    pub fn row(values: &[f64]) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on {}-d tensor", self.shape.len());
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on {}-d tensor", self.shape.len());
        self.shape[1]
    }

    /// Row `i` of a 2-D tensor as a slice.
    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    /// Same data, new shape. Errors if element counts differ.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    /// View a 1-D tensor of length n as a 1xn row matrix (2-D tensors pass through).
    pub fn as_row_matrix(&self) -> Result<Tensor> {
        match self.shape.len() {
            1 => self.reshape(&[1, self.shape[0]]),
            2 => Ok(self.clone()),
            _ => Err(Error::ShapeMismatch(format!(
                "cannot view shape {:?} as a row matrix",
                self.shape
            ))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Largest absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Sum of all elements.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Mean of all elements (0 for an empty tensor).
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    /// Index of the largest element (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// Round every value through f32 precision, as the on-disk formats do.
    pub fn round_to_f32(&self) -> Tensor {
        self.map(|v| v as f32 as f64)
    }
}

/// y = a*x + b*y elementwise, in place on `y`.
pub fn axpby(a: f64, x: &Tensor, b: f64, y: &mut Tensor) {
    assert_eq!(x.shape(), y.shape(), "axpby shape mismatch");
    for (yi, xi) in y.data.iter_mut().zip(&x.data) {
        *yi = a * xi + b * *yi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn numel_matches_shape_product() {
        let t = Tensor::zeros(&[3, 4, 2]);
        assert_eq!(t.numel(), 24);
        assert_eq!(t.shape(), &[3, 4, 2]);
    }

    #[test]
    fn row_access_is_row_major() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.row_slice(1), &[4.0, 5.0, 6.0]);
        assert_eq!(t.get2(0, 2), 3.0);
    }

    #[test]
    fn argmax_takes_first_on_ties() {
        let t = Tensor::row(&[1.0, 7.0, 7.0, 3.0]);
        assert_eq!(t.argmax(), 1);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = t.reshape(&[4]).unwrap();
        assert_eq!(r.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(t.reshape(&[3]).is_err());
    }
}
