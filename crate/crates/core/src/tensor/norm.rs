use std::collections::BTreeMap;

use super::{OpGradient, Result, Tensor, TensorError};
use crate::Scalar;

pub const GROUP_NORM_EPS: f64 = 1e-5;

struct GroupStats {
    /// Per (sample, group): mean and 1/sqrt(var + eps).
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

fn check<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = input.dims4(op)?;
    if groups == 0 || c % groups != 0 {
        return Err(TensorError::Invalid {
            op,
            reason: format!("{c} channels not divisible into {groups} groups"),
        });
    }
    if gamma.len() != c {
        return Err(TensorError::ShapeMismatch {
            op,
            left: input.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    Ok((n, c, h * w))
}

fn stats<T: Scalar>(x: &[T], n: usize, groups: usize, group_len: usize, eps: f64) -> GroupStats {
    let mut mean = Vec::with_capacity(n * groups);
    let mut inv_std = Vec::with_capacity(n * groups);
    for chunk in x.chunks(group_len).take(n * groups) {
        let m = chunk.iter().map(|v| v.as_f64()).sum::<f64>() / group_len as f64;
        let var = chunk
            .iter()
            .map(|v| {
                let d = v.as_f64() - m;
                d * d
            })
            .sum::<f64>()
            / group_len as f64;
        mean.push(m);
        inv_std.push(1.0 / (var + eps).sqrt());
    }
    GroupStats { mean, inv_std }
}

/// Group normalization over `[N,C,H,W]`: each sample's channels are split
/// into `groups` contiguous groups, each group is normalized to zero mean
/// and unit variance over its channel×spatial extent, then scaled by
/// `gamma` and shifted by `beta` per channel.
pub fn group_norm<T: Scalar>(
    input: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (n, c, plane) = check("group_norm", input, groups, gamma)?;
    if beta.len() != c {
        return Err(TensorError::ShapeMismatch {
            op: "group_norm",
            left: gamma.shape().to_vec(),
            right: beta.shape().to_vec(),
        });
    }
    let cpg = c / groups;
    let group_len = cpg * plane;
    let st = stats(input.data(), n, groups, group_len, eps);
    let mut out = vec![T::zero(); input.len()];
    for (gi, (src, dst)) in input
        .data()
        .chunks(group_len)
        .zip(out.chunks_mut(group_len))
        .enumerate()
    {
        let (m, s) = (st.mean[gi], st.inv_std[gi]);
        let first_channel = (gi % groups) * cpg;
        for k in 0..cpg {
            let ch = first_channel + k;
            let (g, b) = (gamma.data()[ch].as_f64(), beta.data()[ch].as_f64());
            // fold normalization and affine into one multiply-add per element
            let scale = T::of(g * s);
            let shift = T::of(b - g * s * m);
            for (o, &v) in dst[k * plane..(k + 1) * plane]
                .iter_mut()
                .zip(&src[k * plane..(k + 1) * plane])
            {
                *o = v * scale + shift;
            }
        }
    }
    Tensor::new(input.shape(), out)?.ensure_finite("group_norm")
}

/// Backward pass of [`group_norm`], including the dependence of the group
/// mean and variance on the input. Parameter gradients are keyed `"gamma"`
/// and `"beta"`.
pub fn group_norm_grad<T: Scalar>(
    input: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    eps: f64,
    upstream: &Tensor<T>,
) -> Result<OpGradient<T>> {
    let (n, c, plane) = check("group_norm_grad", input, groups, gamma)?;
    super::same_shape("group_norm_grad", input, upstream)?;
    let cpg = c / groups;
    let group_len = cpg * plane;
    let st = stats(input.data(), n, groups, group_len, eps);
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    let mut dx = vec![T::zero(); input.len()];
    let mut dxhat = vec![0.0f64; group_len];
    let mut xhat = vec![0.0f64; group_len];
    for gi in 0..n * groups {
        let (m, s) = (st.mean[gi], st.inv_std[gi]);
        let first_channel = (gi % groups) * cpg;
        let base = gi * group_len;
        let x = &input.data()[base..base + group_len];
        let dy = &upstream.data()[base..base + group_len];
        let (mut sum_dxhat, mut sum_dxhat_xhat) = (0.0, 0.0);
        for k in 0..cpg {
            let ch = first_channel + k;
            let g = gamma.data()[ch].as_f64();
            for p in k * plane..(k + 1) * plane {
                let xh = (x[p].as_f64() - m) * s;
                let d = dy[p].as_f64();
                xhat[p] = xh;
                dgamma[ch] += d * xh;
                dbeta[ch] += d;
                dxhat[p] = d * g;
                sum_dxhat += dxhat[p];
                sum_dxhat_xhat += dxhat[p] * xh;
            }
        }
        let len = group_len as f64;
        for p in 0..group_len {
            dx[base + p] = T::of(s / len * (len * dxhat[p] - sum_dxhat - xhat[p] * sum_dxhat_xhat));
        }
    }
    let to_t = |v: Vec<f64>| Tensor::new(gamma.shape(), v.into_iter().map(T::of).collect());
    let mut params = BTreeMap::new();
    params.insert("gamma", to_t(dgamma)?.ensure_finite("group_norm_grad")?);
    params.insert("beta", to_t(dbeta)?.ensure_finite("group_norm_grad")?);
    Ok(OpGradient {
        input: Tensor::new(input.shape(), dx)?.ensure_finite("group_norm_grad")?,
        params,
    })
}
