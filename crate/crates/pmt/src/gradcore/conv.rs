//! 2D convolution, 2x max-pool, and 2x nearest upsample, with full gradients.
//!
//! The conv kernels are written so the stride-1 inner loops are contiguous
//! row operations (axpy / dot), which the compiler vectorizes without any
//! reassociation: reduction order is fixed explicitly, keeping results
//! bitwise reproducible.

use super::tensor::{fixed_order_sum, BackOp, Scalar, Tensor, TensorError};
use super::TensorResult;

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> TensorResult<ConvDims> {
    let is = input.shape();
    let ws = weight.shape();
    let invalid = |msg: String| TensorError::InvalidArg { op: "conv2d", msg };
    if is.len() != 4 || ws.len() != 4 {
        return Err(invalid(format!(
            "expected input [N,C,H,W] and weight [F,C,k,k], got {:?} and {:?}",
            is, ws
        )));
    }
    let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
    let (f, wc, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
    if k != k2 || k % 2 == 0 {
        return Err(invalid(format!("kernel must be square with odd size, got {}x{}", k, k2)));
    }
    if wc != c {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: is,
            rhs: ws,
        });
    }
    if bias.shape() != vec![f] {
        return Err(invalid(format!("bias must be [{}], got {:?}", f, bias.shape())));
    }
    if stride == 0 {
        return Err(invalid("stride must be >= 1".into()));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(invalid(format!("zero-size output for input {}x{} kernel {}", h, w, k)));
    }
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    Ok(ConvDims { n, c, h, w, f, k, oh, ow })
}

/// Valid output-column range for one kernel column at stride 1:
/// `iw = ow + kw - padding` must land in `[0, w)`.
fn col_range(kw: usize, padding: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(kw);
    let hi = (w + padding - kw).min(ow);
    (lo, hi.max(lo))
}

impl<T: Scalar> Tensor<T> {
    /// Cross-correlation of `[N,C,H,W]` input with `[F,C,k,k]` weights.
    ///
    /// Output spatial dims are `floor((H + 2p - k)/stride) + 1`; with
    /// `padding = k/2` and stride 1 the output matches the input size.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> TensorResult<Tensor<T>> {
        let d = conv_dims(self, weight, bias, stride, padding)?;
        let mut out = vec![T::zero(); d.n * d.f * d.oh * d.ow];
        self.with_data(|inp| {
            weight.with_data(|wts| {
                bias.with_data(|bs| {
                    forward_kernel(&d, stride, padding, inp, wts, bs, &mut out);
                })
            })
        });
        if !out.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "conv2d" });
        }
        Ok(Tensor::from_op(
            out,
            vec![d.n, d.f, d.oh, d.ow],
            vec![self.clone(), weight.clone(), bias.clone()],
            BackOp::Conv2d { stride, padding },
        ))
    }

    /// 2x2 max pooling with stride 2. Requires even spatial dims; ties route
    /// the gradient to the first maximal element in scan order.
    pub fn maxpool2x(&self) -> TensorResult<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(TensorError::InvalidArg {
                op: "maxpool2x",
                msg: format!("expected [N,C,even,even], got {:?}", s),
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        self.with_data(|inp| {
            for nc in 0..n * c {
                let base = nc * h * w;
                let obase = nc * oh * ow;
                for y in 0..oh {
                    for x in 0..ow {
                        let mut best_idx = base + (2 * y) * w + 2 * x;
                        let mut best = inp[best_idx];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = base + (2 * y + dy) * w + 2 * x + dx;
                            if inp[idx] > best {
                                best = inp[idx];
                                best_idx = idx;
                            }
                        }
                        out[obase + y * ow + x] = best;
                        argmax[obase + y * ow + x] = best_idx as u32;
                    }
                }
            }
        });
        Ok(Tensor::from_op(
            out,
            vec![n, c, oh, ow],
            vec![self.clone()],
            BackOp::MaxPool2x { argmax },
        ))
    }

    /// Nearest-neighbour 2x upsampling of `[N,C,H,W]`.
    pub fn upsample2x_nearest(&self) -> TensorResult<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(TensorError::InvalidArg {
                op: "upsample2x_nearest",
                msg: format!("expected [N,C,H,W], got {:?}", s),
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * oh * ow];
        self.with_data(|inp| {
            for nc in 0..n * c {
                let base = nc * h * w;
                let obase = nc * oh * ow;
                for y in 0..h {
                    let src = &inp[base + y * w..base + (y + 1) * w];
                    for rep in 0..2 {
                        let row = &mut out[obase + (2 * y + rep) * ow..obase + (2 * y + rep + 1) * ow];
                        for (x, &v) in src.iter().enumerate() {
                            row[2 * x] = v;
                            row[2 * x + 1] = v;
                        }
                    }
                }
            }
        });
        Ok(Tensor::from_op(
            out,
            vec![n, c, oh, ow],
            vec![self.clone()],
            BackOp::Upsample2x,
        ))
    }
}

fn forward_kernel<T: Scalar>(
    d: &ConvDims,
    stride: usize,
    padding: usize,
    inp: &[T],
    wts: &[T],
    bs: &[T],
    out: &mut [T],
) {
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    for n in 0..d.n {
        for f in 0..d.f {
            let o0 = (n * d.f + f) * out_plane;
            out[o0..o0 + out_plane].fill(bs[f]);
            for c in 0..d.c {
                let i0 = (n * d.c + c) * in_plane;
                for kh in 0..d.k {
                    for kw in 0..d.k {
                        let wval = wts[((f * d.c + c) * d.k + kh) * d.k + kw];
                        for oh in 0..d.oh {
                            let ih = oh * stride + kh;
                            if ih < padding || ih - padding >= d.h {
                                continue;
                            }
                            let irow = i0 + (ih - padding) * d.w;
                            let orow = o0 + oh * d.ow;
                            if stride == 1 {
                                let (lo, hi) = col_range(kw, padding, d.w, d.ow);
                                let src = &inp[irow + lo + kw - padding..irow + hi + kw - padding];
                                let dst = &mut out[orow + lo..orow + hi];
                                for (o, &i) in dst.iter_mut().zip(src) {
                                    *o = *o + wval * i;
                                }
                            } else {
                                for ow in 0..d.ow {
                                    let iw = ow * stride + kw;
                                    if iw < padding || iw - padding >= d.w {
                                        continue;
                                    }
                                    out[orow + ow] =
                                        out[orow + ow] + wval * inp[irow + iw - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Four-lane dot product with a fixed reduction order.
fn fixed_order_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let n4 = a.len() / 4 * 4;
    for i in (0..n4).step_by(4) {
        acc[0] = acc[0] + a[i] * b[i];
        acc[1] = acc[1] + a[i + 1] * b[i + 1];
        acc[2] = acc[2] + a[i + 2] * b[i + 2];
        acc[3] = acc[3] + a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in n4..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

/// Gradients of conv2d w.r.t. input, weight, and bias.
pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    gout: &[T],
    out_shape: &[usize],
    stride: usize,
    padding: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let is = input.shape();
    let ws = weight.shape();
    let (n_, c, h, w) = (is[0], is[1], is[2], is[3]);
    let (f, k) = (ws[0], ws[2]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let in_plane = h * w;
    let out_plane = oh * ow;

    let mut gi = vec![T::zero(); n_ * c * in_plane];
    let mut gw = vec![T::zero(); f * c * k * k];
    let mut gb = vec![T::zero(); f];

    input.with_data(|inp| {
        weight.with_data(|wts| {
            for n in 0..n_ {
                for fo in 0..f {
                    let o0 = (n * f + fo) * out_plane;
                    gb[fo] = gb[fo] + fixed_order_sum(&gout[o0..o0 + out_plane]);
                    for ci in 0..c {
                        let i0 = (n * c + ci) * in_plane;
                        for kh in 0..k {
                            for kw in 0..k {
                                let widx = ((fo * c + ci) * k + kh) * k + kw;
                                let wval = wts[widx];
                                let mut wacc = T::zero();
                                for oh_i in 0..oh {
                                    let ih = oh_i * stride + kh;
                                    if ih < padding || ih - padding >= h {
                                        continue;
                                    }
                                    let irow = i0 + (ih - padding) * w;
                                    let orow = o0 + oh_i * ow;
                                    if stride == 1 {
                                        let (lo, hi) = col_range(kw, padding, w, ow);
                                        let grow = &gout[orow + lo..orow + hi];
                                        let icol = irow + lo + kw - padding;
                                        wacc = wacc
                                            + fixed_order_dot(grow, &inp[icol..icol + hi - lo]);
                                        let gdst = &mut gi[icol..icol + hi - lo];
                                        for (gd, &go) in gdst.iter_mut().zip(grow) {
                                            *gd = *gd + wval * go;
                                        }
                                    } else {
                                        for ow_i in 0..ow {
                                            let iw = ow_i * stride + kw;
                                            if iw < padding || iw - padding >= w {
                                                continue;
                                            }
                                            let go = gout[orow + ow_i];
                                            wacc = wacc + go * inp[irow + iw - padding];
                                            gi[irow + iw - padding] =
                                                gi[irow + iw - padding] + wval * go;
                                        }
                                    }
                                }
                                gw[widx] = gw[widx] + wacc;
                            }
                        }
                    }
                }
            }
        })
    });
    (gi, gw, gb)
}

/// Gradient of nearest 2x upsampling: each input cell collects its 2x2 block.
pub(crate) fn upsample2x_backward<T: Scalar>(gout: &[T], out_shape: &[usize]) -> Vec<T> {
    let (n, c, oh, ow) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
    let (h, w) = (oh / 2, ow / 2);
    let mut gi = vec![T::zero(); n * c * h * w];
    for nc in 0..n * c {
        let obase = nc * oh * ow;
        let ibase = nc * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut s = T::zero();
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    s = s + gout[obase + (2 * y + dy) * ow + 2 * x + dx];
                }
                gi[ibase + y * w + x] = s;
            }
        }
    }
    gi
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;

    #[test]
    fn ones_kernel_center_is_nine() {
        let input = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let weight = Tensor::full(&[1, 1, 3, 3], 1.0);
        let bias = Tensor::zeros(&[1]);
        let out = input.conv2d(&weight, &bias, 1, 1).unwrap();
        assert_eq!(out.shape(), vec![1, 1, 3, 3]);
        // center sees the full 3x3 neighbourhood of ones
        assert_eq!(out.to_vec()[4], 9.0);
        // corners see a 2x2 patch
        assert_eq!(out.to_vec()[0], 4.0);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let vals: Vec<f64> = (0..16).map(|i| i as f64 * 0.5 - 3.0).collect();
        let input = Tensor::<f64>::from_vec(vals.clone(), &[1, 1, 4, 4]).unwrap();
        let mut kw = vec![0.0; 9];
        kw[4] = 1.0; // single 1 at kernel center
        let weight = Tensor::from_vec(kw, &[1, 1, 3, 3]).unwrap();
        let bias = Tensor::zeros(&[1]);
        let out = input.conv2d(&weight, &bias, 1, 1).unwrap();
        assert_eq!(out.to_vec(), vals);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let input = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let weight = Tensor::zeros(&[1, 3, 3, 3]);
        let bias = Tensor::zeros(&[1]);
        assert!(input.conv2d(&weight, &bias, 1, 1).is_err());
    }

    #[test]
    fn zero_size_output_rejected() {
        let input = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let weight = Tensor::zeros(&[1, 1, 5, 5]);
        let bias = Tensor::zeros(&[1]);
        assert!(input.conv2d(&weight, &bias, 1, 0).is_err());
    }

    #[test]
    fn stride_two_output_dims() {
        let input = Tensor::<f32>::zeros(&[1, 1, 8, 8]);
        let weight = Tensor::zeros(&[2, 1, 3, 3]);
        let bias = Tensor::zeros(&[2]);
        let out = input.conv2d(&weight, &bias, 2, 1).unwrap();
        assert_eq!(out.shape(), vec![1, 2, 4, 4]);
    }

    #[test]
    fn maxpool_value_and_grad_routing() {
        let input = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        input.set_requires_grad(true);
        let out = input.maxpool2x().unwrap();
        assert_eq!(out.to_vec(), vec![4.0]);
        out.sum().unwrap().backward().unwrap();
        // gradient routes to position (1,1), the argmax
        assert_eq!(input.grad().unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_tie_breaks_to_first_in_scan_order() {
        let input = Tensor::<f64>::from_vec(vec![5.0, 5.0, 5.0, 5.0], &[1, 1, 2, 2]).unwrap();
        input.set_requires_grad(true);
        let out = input.maxpool2x().unwrap();
        out.sum().unwrap().backward().unwrap();
        assert_eq!(input.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_nearest_and_grad() {
        let input = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[1, 1, 1, 2]).unwrap();
        input.set_requires_grad(true);
        let out = input.upsample2x_nearest().unwrap();
        assert_eq!(out.shape(), vec![1, 1, 2, 4]);
        assert_eq!(out.to_vec(), vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        out.sum().unwrap().backward().unwrap();
        assert_eq!(input.grad().unwrap(), vec![4.0, 4.0]);
    }
}
