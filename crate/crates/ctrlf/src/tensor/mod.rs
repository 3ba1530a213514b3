//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Values live on a [`Tape`]: every operation appends a record holding the
//! output buffer plus whatever the backward pass needs. Training runs in
//! `f32`; gradient checking instantiates the same code with `f64`.

pub mod kernels;
pub mod tape;

pub use tape::{OpKind, Tape, TensorId};

use std::fmt;
use std::iter::Sum;

/// Element type of all tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float + Default + Sum + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn from_f64(x: f64) -> Self;
    fn to_f64_(self) -> f64;
    fn from_usize(x: usize) -> Self {
        Self::from_f64(x as f64)
    }
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64_(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64_(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Owned tensor value: a shape plus contiguous row-major data.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> TensorData<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        TensorData { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        TensorData {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(v: T) -> Self {
        TensorData {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Lossy dtype conversion through `f64`.
    pub fn cast<U: Scalar>(&self) -> TensorData<U> {
        TensorData {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64_())).collect(),
        }
    }
}
