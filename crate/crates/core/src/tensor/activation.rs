use super::{same_shape, Result, Tensor, TensorError};
use crate::Scalar;

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `upstream` where `input > 0`; the derivative at exactly zero is 0.
pub fn relu_grad<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("relu_grad", input, upstream)?;
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data)
}

/// Elementwise sum. The gradient w.r.t. either operand is the upstream gradient.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape(), data)?.ensure_finite("add")
}

pub fn sigmoid<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    z.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar<T: Scalar>(z: T) -> T {
    // branch keeps exp() from overflowing for large |z|
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax of an `[M,K]` matrix, computed after subtracting each row's max.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let &[_, k] = logits.shape() else {
        return Err(TensorError::Rank {
            op: "softmax_rows",
            expected: 2,
            shape: logits.shape().to_vec(),
        });
    };
    let mut out = logits.clone();
    if k == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out.ensure_finite("softmax_rows")
}
