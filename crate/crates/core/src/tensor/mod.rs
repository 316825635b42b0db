//! Dense tensors with reverse-mode differentiation.
//!
//! [`Tensor`] is the universal value: a row-major contiguous buffer with a
//! shape and dtype. [`Graph`] records primitive applications eagerly and
//! replays them in reverse for gradients. Values are computed in f64; tensors
//! tagged [`DType::F32`] have every op result rounded through f32 so the
//! deployment path has genuine f32 precision.

mod check;
mod graph;
mod ops;

pub use check::{finite_diff_check, finite_diff_check_multi, DEFAULT_FD_STEP};
pub use graph::{Graph, Op, Var};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Element type of a tensor. `I8` appears only in serialized weight tables
/// and [`crate::quant::QuantizedTensor`]; in-memory arithmetic tensors are
/// `F32` or `F64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    I8,
}

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
    pub requires_grad: bool,
    /// Populated by gradient checks and by callers that mirror graph
    /// gradients back onto leaves; always the same length as `data`.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dimension in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            dtype: DType::F64,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            dtype: DType::F64,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            dtype: DType::F64,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar_value(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            dtype: DType::F64,
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform values in [lo, hi), snapped to the f32 grid so the tensor
    /// survives an f32 container round trip bit-exactly.
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.range(lo, hi) as f32 as f64).collect();
        Tensor {
            shape,
            dtype: DType::F64,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Convert the storage dtype, snapping values onto the f32 grid when
    /// narrowing. Arithmetic always runs in f64; the tag records what the
    /// values are representable as (and what the weight container stores).
    pub fn with_dtype(mut self, dtype: DType) -> Result<Self> {
        if dtype == DType::I8 {
            return Err(Error::Param(
                "i8 tensors are represented by QuantizedTensor".into(),
            ));
        }
        if dtype == DType::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
        self.dtype = dtype;
        Ok(self)
    }

    /// Tag the dtype without touching values (op outputs inherit their
    /// inputs' tag; the values themselves are exact f64 results).
    pub(crate) fn with_dtype_tag(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    pub(crate) fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }
}

pub(crate) fn same_dtype(a: &Tensor, b: &Tensor) -> Result<DType> {
    if a.dtype != b.dtype {
        return Err(Error::Shape(format!(
            "dtype mismatch: {:?} vs {:?}",
            a.dtype, b.dtype
        )));
    }
    Ok(a.dtype)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::from_vec(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(Tensor::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn i8_dtype_rejected_for_dense_tensors() {
        let t = Tensor::zeros(vec![2]);
        assert!(t.with_dtype(DType::I8).is_err());
    }

    #[test]
    fn f32_dtype_snaps_values() {
        let t = Tensor::from_vec(vec![1], vec![0.1f64 + 1e-12])
            .unwrap()
            .with_dtype(DType::F32)
            .unwrap();
        assert_eq!(t.data()[0], (0.1f64 + 1e-12) as f32 as f64);
    }
}
