//! Dense row-major tensors, the operator set used by the toy graphs, and a
//! small tape for reverse-mode differentiation.
//!
//! Floating-point data lives in [`Tensor`]; integer data (quantized levels and
//! INT32 accumulators) lives in [`IntTensor`], whose elements are stored as
//! `i32` together with the legal range they were declared with.

mod autodiff;
mod io;
pub mod ops;

pub use autodiff::{CustomBackward, Gradients, Tape, Var};
pub use io::{TensorFile, TensorFileDtype};
pub use ops::{BatchNormMode, BatchNormOutput, Conv2dParams};

use crate::error::{Error, Result};

/// Element kind of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    /// Integer values restricted to `[-128, 127]`.
    I8Range,
    /// Full 32-bit signed range.
    I32Range,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape("Tensor::new", &shape, data.len())?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        DType::F32
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        check_shape("reshape", &shape, self.data.len())?;
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|x| !x.is_finite())
    }

    pub fn abs_max(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &x| m.max(x.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<i32>,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, dtype: DType, data: Vec<i32>) -> Result<Self> {
        check_shape("IntTensor::new", &shape, data.len())?;
        match dtype {
            DType::F32 => {
                return Err(Error::InvalidArgument(
                    "IntTensor requires an integer dtype".into(),
                ))
            }
            DType::I8Range => {
                if let Some(i) = data.iter().position(|v| !(-128..=127).contains(v)) {
                    return Err(Error::Contract(format!(
                        "element {} = {} outside I8 range",
                        i, data[i]
                    )));
                }
            }
            DType::I32Range => {}
        }
        Ok(Self { shape, dtype, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<i32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

fn check_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::shape(op, format!("zero extent in shape {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::shape(
            op,
            format!("shape {shape:?} holds {n} elements but data has {len}"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape { .. })
        ));
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn i8_range_is_enforced() {
        assert!(IntTensor::new(vec![2], DType::I8Range, vec![-128, 127]).is_ok());
        assert!(IntTensor::new(vec![1], DType::I8Range, vec![128]).is_err());
        assert!(IntTensor::new(vec![1], DType::I32Range, vec![1 << 20]).is_ok());
    }
}
