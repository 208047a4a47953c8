//! Minimal dense-array math with a differentiation contract: every operation
//! provides exact-shape forward results and gradients that are verified
//! against central finite differences in the test suite.

pub mod attention;
pub mod gradcheck;
pub mod tape;


pub use tape::{Grads, Tape, Var};

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by tensor and tape operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NumError {
    /// Operand shapes are incompatible for the named operation.
    ShapeMismatch { op: &'static str, detail: String },
    /// A token or row index is outside the table it indexes.
    IndexOutOfVocab { index: usize, size: usize },
}

impl fmt::Display for NumError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            NumError::IndexOutOfVocab { index, size } => {
                write!(f, "index {index} out of vocabulary of size {size}")
            }
        }
    }
}

impl core::error::Error for NumError {}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense row-major tensor. Scalars have an empty shape, vectors one axis,
/// matrices two.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumError> {
        if numel(&shape) != data.len() {
            return Err(NumError::ShapeMismatch {
                op: "Tensor::new",
                detail: alloc::format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel(shape)] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    /// 1-D tensor from raw values.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
