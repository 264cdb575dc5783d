//! Dense row-major tensors and the differentiable operations the network is
//! built from. Every backward function is a plain function of the forward
//! inputs and the upstream gradient; there is no autograd graph.

mod activation;
mod adam;
mod conv;
mod norm;
mod pool;

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::Scalar;

pub(crate) use activation::sigmoid_scalar;
pub use activation::{add, relu, relu_grad, sigmoid, softmax_rows};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::{conv2d, conv2d_grad};
pub use norm::{group_norm, group_norm_grad, GROUP_NORM_EPS};
pub use pool::{maxpool2, maxpool2_grad, upsample2_grad, upsample2_nearest};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Dense n-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::Rank {
                op,
                expected: 4,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        same_shape("add_assign", self, other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Channel-wise concatenation of two `[N,C,H,W]` tensors.
    pub fn concat_channels(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, ca, h, w) = a.dims4("concat_channels")?;
        let (nb, cb, hb, wb) = b.dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..n {
            data.extend_from_slice(&a.data[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&b.data[i * cb * plane..(i + 1) * cb * plane]);
        }
        Tensor::new(&[n, ca + cb, h, w], data)
    }

    /// Inverse of [`Tensor::concat_channels`]: the first `split` channels and the rest.
    pub fn split_channels(&self, split: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let (n, c, h, w) = self.dims4("split_channels")?;
        if split > c {
            return Err(TensorError::Invalid {
                op: "split_channels",
                reason: format!("split point {split} exceeds {c} channels"),
            });
        }
        let plane = h * w;
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for i in 0..n {
            let base = i * c * plane;
            a.extend_from_slice(&self.data[base..base + split * plane]);
            b.extend_from_slice(&self.data[base + split * plane..base + c * plane]);
        }
        Ok((
            Tensor::new(&[n, split, h, w], a)?,
            Tensor::new(&[n, c - split, h, w], b)?,
        ))
    }
}

pub(crate) fn same_shape<T>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

/// Gradients produced by one backward operation.
#[derive(Debug, Clone, PartialEq)]
pub struct OpGradient<T> {
    pub input: Tensor<T>,
    pub params: BTreeMap<&'static str, Tensor<T>>,
}

impl<T> OpGradient<T> {
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn take_param(&mut self, name: &str) -> Option<Tensor<T>> {
        self.params.remove(name)
    }
}
