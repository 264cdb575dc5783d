use super::{Result, Tensor, TensorError};
use crate::Scalar;

/// 2×2 non-overlapping max pooling.
///
/// Returns the pooled tensor and, for every output element, the flat index
/// of the input element it came from. Ties go to the first element in
/// row-major window order.
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4("maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::Invalid {
            op: "maxpool2",
            reason: format!("spatial extent {h}x{w} is not even"),
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    let x = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let top = base + 2 * i * w + 2 * j;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, argmax))
}

/// Routes each upstream value to the input position recorded in `argmax`.
pub fn maxpool2_grad<T: Scalar>(input_shape: &[usize], argmax: &[usize], upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if argmax.len() != upstream.len() {
        return Err(TensorError::Invalid {
            op: "maxpool2_grad",
            reason: format!("{} argmax entries for {} upstream values", argmax.len(), upstream.len()),
        });
    }
    let mut dx = Tensor::zeros(input_shape);
    for (&idx, &g) in argmax.iter().zip(upstream.data()) {
        let slot = dx.data_mut().get_mut(idx).ok_or_else(|| TensorError::Invalid {
            op: "maxpool2_grad",
            reason: format!("argmax index {idx} outside input shape {input_shape:?}"),
        })?;
        *slot = *slot + g;
    }
    Ok(dx)
}

/// Nearest-neighbour ×2 upsampling: each value fills a 2×2 block.
pub fn upsample2_nearest<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("upsample2_nearest")?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for (plane, src) in input.data().chunks(h * w).enumerate() {
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for i in 0..h {
            for j in 0..w {
                let v = src[i * w + j];
                let r0 = 2 * i * wo + 2 * j;
                dst[r0] = v;
                dst[r0 + 1] = v;
                dst[r0 + wo] = v;
                dst[r0 + wo + 1] = v;
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

/// Sums each 2×2 block of the upstream gradient.
pub fn upsample2_grad<T: Scalar>(upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, ho, wo) = upstream.dims4("upsample2_grad")?;
    if ho % 2 != 0 || wo % 2 != 0 {
        return Err(TensorError::Invalid {
            op: "upsample2_grad",
            reason: format!("upstream extent {ho}x{wo} is not even"),
        });
    }
    let (h, w) = (ho / 2, wo / 2);
    let mut out = vec![T::zero(); n * c * h * w];
    for (plane, src) in upstream.data().chunks(ho * wo).enumerate() {
        for i in 0..h {
            for j in 0..w {
                let r0 = 2 * i * wo + 2 * j;
                out[plane * h * w + i * w + j] = src[r0] + src[r0 + 1] + src[r0 + wo] + src[r0 + wo + 1];
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}
