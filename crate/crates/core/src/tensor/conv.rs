use std::collections::BTreeMap;

use super::{OpGradient, Result, Tensor, TensorError};
use crate::Scalar;

/// Geometry shared by the forward and backward passes.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1x1, stride-1, unpadded convolution reads its input directly as the
    /// column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0 && self.stride == 1
    }
}

fn geometry<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, padding: usize, stride: usize) -> Result<ConvGeom> {
    let (n, cin, h, w) = input.dims4("conv2d")?;
    let (cout, wcin, kh, kw) = weight.dims4("conv2d")?;
    if cin != wcin {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: input.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(TensorError::Invalid {
            op: "conv2d",
            reason: format!("kernel extents must be odd, got {kh}x{kw}"),
        });
    }
    if !(1..=2).contains(&stride) {
        return Err(TensorError::Invalid {
            op: "conv2d",
            reason: format!("stride must be 1 or 2, got {stride}"),
        });
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(TensorError::Invalid {
            op: "conv2d",
            reason: format!("kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"),
        });
    }
    Ok(ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        pad: padding,
        stride,
        ho: (h + 2 * padding - kh) / stride + 1,
        wo: (w + 2 * padding - kw) / stride + 1,
    })
}

/// Unfolds one sample (`[cin, h, w]`) into a `[cin*kh*kw, ho*wo]` matrix.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &xc[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, o) in out_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *o = if jj < 0 || jj >= g.w as isize {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back into one sample's input layout.
fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dxc[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] = dst[jj as usize] + src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding.
///
/// `input` is `[N,Cin,H,W]`, `weight` is `[Cout,Cin,kh,kw]`, `bias` has `Cout`
/// entries. Output spatial extent is `(H + 2·padding − kh)/stride + 1`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = geometry(input, weight, padding, stride)?;
    if bias.len() != g.cout {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: weight.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let plane = g.out_plane();
    let in_sample = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * plane]
    };
    for s in 0..g.n {
        let x = &input.data()[s * in_sample..(s + 1) * in_sample];
        let y = &mut out[s * g.cout * plane..(s + 1) * g.cout * plane];
        for (co, &b) in bias.data().iter().enumerate() {
            y[co * plane..(co + 1) * plane].fill(b);
        }
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(&g, x, &mut col);
            &col
        };
        T::gemm(g.cout, g.patch(), plane, weight.data(), false, cols, false, T::one(), y);
    }
    Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)?.ensure_finite("conv2d")
}

/// Backward pass of [`conv2d`]. Parameter gradients are keyed `"weight"` and `"bias"`.
pub fn conv2d_grad<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    upstream: &Tensor<T>,
    padding: usize,
    stride: usize,
) -> Result<OpGradient<T>> {
    let g = geometry(input, weight, padding, stride)?;
    let expected = [g.n, g.cout, g.ho, g.wo];
    if upstream.shape() != expected {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_grad",
            left: expected.to_vec(),
            right: upstream.shape().to_vec(),
        });
    }
    let plane = g.out_plane();
    let in_sample = g.cin * g.h * g.w;
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); g.cout];
    let mut dx = vec![T::zero(); input.len()];
    let mut col = vec![T::zero(); g.patch() * plane];
    for s in 0..g.n {
        let x = &input.data()[s * in_sample..(s + 1) * in_sample];
        let dy = &upstream.data()[s * g.cout * plane..(s + 1) * g.cout * plane];
        for (co, acc) in db.iter_mut().enumerate() {
            *acc = *acc + dy[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
        }
        let dxs = &mut dx[s * in_sample..(s + 1) * in_sample];
        if g.is_pointwise() {
            T::gemm(g.cout, plane, g.cin, dy, false, x, true, T::one(), &mut dw);
            T::gemm(g.cin, g.cout, plane, weight.data(), true, dy, false, T::zero(), dxs);
        } else {
            im2col(&g, x, &mut col);
            T::gemm(g.cout, plane, g.patch(), dy, false, &col, true, T::one(), &mut dw);
            T::gemm(
                g.patch(),
                g.cout,
                plane,
                weight.data(),
                true,
                dy,
                false,
                T::zero(),
                &mut col,
            );
            col2im(&g, &col, dxs);
        }
    }
    let mut params = BTreeMap::new();
    params.insert("weight", Tensor::new(weight.shape(), dw)?.ensure_finite("conv2d_grad")?);
    params.insert("bias", Tensor::new(&[g.cout], db)?.ensure_finite("conv2d_grad")?);
    Ok(OpGradient {
        input: Tensor::new(input.shape(), dx)?.ensure_finite("conv2d_grad")?,
        params,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::testutil::{central_difference, max_rel_error};

    /// Direct nested-loop cross-correlation.
    fn brute_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: usize, stride: usize) -> Tensor<f64> {
        let [n, cin, h, wd] = x.shape()[..] else { unreachable!() };
        let [cout, _, kh, kw] = w.shape()[..] else {
            unreachable!()
        };
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        for s in 0..n {
            for co in 0..cout {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ii = (oi * stride + ki) as isize - pad as isize;
                                    let jj = (oj * stride + kj) as isize - pad as isize;
                                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((s * cin + ci) * h + ii as usize) * wd + jj as usize];
                                    let wv = w.data()[((co * cin + ci) * kh + ki) * kw + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((s * cout + co) * ho + oi) * wo + oj] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_sums_neighbourhood() {
        let x = Tensor::new(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap();
        assert_eq!(y.data()[4], 45.0);
        assert_eq!(y.data()[0], 12.0);
        assert_eq!(y, brute_conv(&x, &w, &Tensor::zeros(&[1]), 1, 1));
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::uniform(&[2, 1, 4, 5], 3.0, &mut rng);
        let y = conv2d(&x, &Tensor::full(&[1, 1, 1, 1], 1.0), &Tensor::zeros(&[1]), 0, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn random_case_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::uniform(&[2, 4, 5, 5], 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[3, 4, 3, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[3], 1.0, &mut rng);
        for (pad, stride) in [(1, 1), (0, 1), (1, 2), (0, 2)] {
            let fast = conv2d(&x, &w, &b, pad, stride).unwrap();
            let slow = brute_conv(&x, &w, &b, pad, stride);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12, "pad {pad} stride {stride}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert!(conv2d(&x, &w, &Tensor::zeros(&[1]), 0, 1).is_err());
    }

    #[test]
    fn identity_kernel_passes_upstream_through() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| i as f64);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let g = conv2d_grad(&x, &w, &Tensor::full(&[1, 1, 3, 3], 1.0), 0, 1).unwrap();
        assert_eq!(g.input, Tensor::full(&[1, 1, 3, 3], 1.0));
    }

    #[test]
    fn pointwise_weight_gradient_sums_input() {
        let x = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0);
        let w = Tensor::full(&[1, 1, 1, 1], 0.7);
        let g = conv2d_grad(&x, &w, &Tensor::full(&[1, 1, 2, 2], 1.0), 0, 1).unwrap();
        assert_eq!(g.param("weight").unwrap().data(), &[4.0]);
        assert_eq!(g.param("bias").unwrap().data(), &[4.0]);
    }

    #[test]
    fn upstream_shape_checked() {
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        let w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        assert!(conv2d_grad(&x, &w, &Tensor::zeros(&[1, 1, 2, 2]), 1, 1).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (pad, stride) in [(1, 1), (1, 2), (0, 1)] {
            let x = Tensor::<f64>::uniform(&[2, 3, 5, 4], 1.0, &mut rng);
            let w = Tensor::<f64>::uniform(&[2, 3, 3, 3], 1.0, &mut rng);
            let b = Tensor::<f64>::uniform(&[2], 1.0, &mut rng);
            let y = conv2d(&x, &w, &b, pad, stride).unwrap();
            let probe = Tensor::<f64>::uniform(y.shape(), 1.0, &mut rng);
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
                let y = conv2d(x, w, b, pad, stride).unwrap();
                y.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum::<f64>()
            };
            let g = conv2d_grad(&x, &w, &probe, pad, stride).unwrap();
            let nx = central_difference(&x, |t| loss(t, &w, &b));
            let nw = central_difference(&w, |t| loss(&x, t, &b));
            let nb = central_difference(&b, |t| loss(&x, &w, t));
            assert!(max_rel_error(&g.input, &nx) < 1e-4);
            assert!(max_rel_error(g.param("weight").unwrap(), &nw) < 1e-4);
            assert!(max_rel_error(g.param("bias").unwrap(), &nb) < 1e-4);
        }
    }
}
