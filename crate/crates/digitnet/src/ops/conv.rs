//! 2-d cross-correlation (no kernel flip) via im2col + GEMM, plus a
//! quadruple-loop oracle kept bitwise-independent of the optimized path.

use crate::error::{Error, Result};
use crate::ops::{Op, Padding};
use crate::scalar::{gemm_into, Mat, Scalar};
use crate::tensor::Tensor;

/// Output spatial extents and top/left padding for one axis pair.
/// Same padding distributes the total of `k - 1` (stride 1) with the smaller
/// share on top/left.
pub fn conv2d_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: Padding,
) -> Result<(usize, usize, usize, usize)> {
    if stride == 0 {
        return Err(Error::contract("conv2d stride must be >= 1"));
    }
    match pad {
        Padding::Same => {
            let oh = h.div_ceil(stride);
            let ow = w.div_ceil(stride);
            let total_h = ((oh - 1) * stride + kh).saturating_sub(h);
            let total_w = ((ow - 1) * stride + kw).saturating_sub(w);
            Ok((oh, ow, total_h / 2, total_w / 2))
        }
        Padding::Valid => {
            if h < kh || w < kw {
                return Err(Error::contract(format!(
                    "valid conv needs input >= kernel, got {h}x{w} vs {kh}x{kw}"
                )));
            }
            Ok(((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0))
        }
    }
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

fn check_conv<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: Padding,
) -> Result<ConvDims> {
    if x.shape().len() != 4 {
        return Err(Error::contract(format!(
            "conv2d expects (N, C, H, W) input, got {:?}",
            x.shape()
        )));
    }
    if weight.shape().len() != 4 {
        return Err(Error::contract(format!(
            "conv2d expects (out, in, kh, kw) weights, got {:?}",
            weight.shape()
        )));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oc, ic, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if ic != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    if bias.shape() != [oc] {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            lhs: weight.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let (oh, ow, pad_top, pad_left) = conv2d_out_dims(h, w, kh, kw, stride, pad)?;
    Ok(ConvDims {
        n,
        c,
        h,
        w,
        oc,
        kh,
        kw,
        oh,
        ow,
        pad_top,
        pad_left,
    })
}

/// col is (C*kh*kw) x (oh*ow); out-of-image taps read zero.
fn im2col<T: Scalar>(img: &[T], d: &ConvDims, stride: usize, col: &mut [T]) {
    let p = d.oh * d.ow;
    for c in 0..d.c {
        let chan = &img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((c * d.kh + ki) * d.kw + kj) * p;
                for oy in 0..d.oh {
                    let iy = (oy * stride + ki) as isize - d.pad_top as isize;
                    let base = row + oy * d.ow;
                    if iy < 0 || iy >= d.h as isize {
                        col[base..base + d.ow].fill(T::zero());
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..d.ow {
                        let ix = (ox * stride + kj) as isize - d.pad_left as isize;
                        col[base + ox] = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            chan[iy * d.w + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a col-shaped gradient back into image space.
fn col2im_add<T: Scalar>(col: &[T], d: &ConvDims, stride: usize, img: &mut [T]) {
    let p = d.oh * d.ow;
    for c in 0..d.c {
        let chan = &mut img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((c * d.kh + ki) * d.kw + kj) * p;
                for oy in 0..d.oh {
                    let iy = (oy * stride + ki) as isize - d.pad_top as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let base = row + oy * d.ow;
                    for ox in 0..d.ow {
                        let ix = (ox * stride + kj) as isize - d.pad_left as isize;
                        if ix >= 0 && ix < d.w as isize {
                            let idx = iy * d.w + ix as usize;
                            chan[idx] = chan[idx] + col[base + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: Padding,
) -> Result<Tensor<T>> {
    let d = check_conv(x, weight, bias, stride, pad)?;
    let k = d.c * d.kh * d.kw;
    let p = d.oh * d.ow;
    let mut col = vec![T::zero(); k * p];
    let mut out = vec![T::zero(); d.n * d.oc * p];
    for img in 0..d.n {
        let xi = &x.data()[img * d.c * d.h * d.w..(img + 1) * d.c * d.h * d.w];
        im2col(xi, &d, stride, &mut col);
        let oi = &mut out[img * d.oc * p..(img + 1) * d.oc * p];
        gemm_into(
            oi,
            false,
            Mat::new(weight.data(), d.oc, k),
            Mat::new(&col, k, p),
        );
        for o in 0..d.oc {
            let b = bias.data()[o];
            for v in &mut oi[o * p..(o + 1) * p] {
                *v = *v + b;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![d.n, d.oc, d.oh, d.ow],
        out,
        Op::Conv2d {
            x: x.clone(),
            w: weight.clone(),
            b: bias.clone(),
            stride,
            pad,
        },
    ))
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: Padding,
    g: &[T],
) -> Vec<(Tensor<T>, Vec<T>)> {
    let d = check_conv(x, weight, bias, stride, pad).expect("shapes already validated in forward");
    let k = d.c * d.kh * d.kw;
    let p = d.oh * d.ow;
    let mut col = vec![T::zero(); k * p];
    let mut dcol = vec![T::zero(); k * p];
    let mut dw = vec![T::zero(); d.oc * k];
    let mut db = vec![T::zero(); d.oc];
    let mut dx = vec![T::zero(); x.len()];
    for img in 0..d.n {
        let xi = &x.data()[img * d.c * d.h * d.w..(img + 1) * d.c * d.h * d.w];
        let gi = &g[img * d.oc * p..(img + 1) * d.oc * p];
        im2col(xi, &d, stride, &mut col);
        // dW += g . col^T
        gemm_into(
            &mut dw,
            true,
            Mat::new(gi, d.oc, p),
            Mat::new(&col, k, p).t(),
        );
        for o in 0..d.oc {
            let mut s = T::zero();
            for &v in &gi[o * p..(o + 1) * p] {
                s = s + v;
            }
            db[o] = db[o] + s;
        }
        // dcol = W^T . g, then scatter into dx
        gemm_into(
            &mut dcol,
            false,
            Mat::new(weight.data(), d.oc, k).t(),
            Mat::new(gi, d.oc, p),
        );
        col2im_add(
            &dcol,
            &d,
            stride,
            &mut dx[img * d.c * d.h * d.w..(img + 1) * d.c * d.h * d.w],
        );
    }
    vec![(x.clone(), dx), (weight.clone(), dw), (bias.clone(), db)]
}

/// Direct quadruple-nested-loop convolution; shares no kernel code with the
/// im2col path. Output is a plain leaf tensor (no autograd linkage).
pub fn conv2d_naive_oracle<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: Padding,
) -> Result<Tensor<T>> {
    let d = check_conv(x, weight, bias, stride, pad)?;
    let mut out = vec![T::zero(); d.n * d.oc * d.oh * d.ow];
    for img in 0..d.n {
        for o in 0..d.oc {
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let mut acc = bias.data()[o];
                    for c in 0..d.c {
                        for ki in 0..d.kh {
                            for kj in 0..d.kw {
                                let iy = (oy * stride + ki) as isize - d.pad_top as isize;
                                let ix = (ox * stride + kj) as isize - d.pad_left as isize;
                                if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                    continue;
                                }
                                let xv = x.data()
                                    [((img * d.c + c) * d.h + iy as usize) * d.w + ix as usize];
                                let wv = weight.data()[((o * d.c + c) * d.kh + ki) * d.kw + kj];
                                acc = acc + xv * wv;
                            }
                        }
                    }
                    out[((img * d.oc + o) * d.oh + oy) * d.ow + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(vec![d.n, d.oc, d.oh, d.ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn scalar_product_case() {
        let x = t(vec![1, 1, 1, 1], vec![3.0]);
        let w = t(vec![1, 1, 1, 1], vec![2.0]);
        let b = t(vec![1], vec![0.0]);
        let y = conv2d(&x, &w, &b, 1, Padding::Same).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn hand_expanded_valid_conv() {
        let x = t(
            vec![1, 1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        );
        let w = t(vec![1, 1, 2, 2], vec![1.0; 4]);
        let b = t(vec![1], vec![0.0]);
        let y = conv2d(&x, &w, &b, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[12.0, 16.0, 24.0, 28.0]);
        let o = conv2d_naive_oracle(&x, &w, &b, 1, Padding::Valid).unwrap();
        assert_eq!(o.data(), y.data());
    }

    #[test]
    fn same_padding_keeps_spatial_size() {
        let mut rng = Rng::from_seed(1);
        let x = Tensor::<f32>::randn(vec![2, 1, 32, 32], &mut rng).unwrap();
        let w = Tensor::<f32>::randn(vec![32, 1, 2, 2], &mut rng).unwrap();
        let b = Tensor::<f32>::zeros(vec![32]).unwrap();
        let y = conv2d(&x, &w, &b, 1, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[2, 32, 32, 32]);
    }

    #[test]
    fn even_kernel_same_padding_is_bottom_right_heavy() {
        // 2x2 kernel, stride 1: pad 0 on top/left, 1 on bottom/right.
        let (oh, ow, pt, pl) = conv2d_out_dims(4, 4, 2, 2, 1, Padding::Same).unwrap();
        assert_eq!((oh, ow, pt, pl), (4, 4, 0, 0));
        // 3x3 stride 2 on 32: out 16, total pad 1 -> top 0.
        let (oh, _, pt, _) = conv2d_out_dims(32, 32, 3, 3, 2, Padding::Same).unwrap();
        assert_eq!((oh, pt), (16, 0));
        // 3x3 stride 1: symmetric pad 1.
        let (oh, _, pt, _) = conv2d_out_dims(8, 8, 3, 3, 1, Padding::Same).unwrap();
        assert_eq!((oh, pt), (8, 1));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::<f32>::zeros(vec![1, 3, 4, 4]).unwrap();
        let w = Tensor::<f32>::zeros(vec![2, 1, 2, 2]).unwrap();
        let b = Tensor::<f32>::zeros(vec![2]).unwrap();
        assert!(conv2d(&x, &w, &b, 1, Padding::Same).is_err());
    }

    #[test]
    fn zero_input_gives_bias_broadcast() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 4, 4]).unwrap();
        let mut rng = Rng::from_seed(2);
        let w = Tensor::<f64>::randn(vec![3, 2, 3, 3], &mut rng).unwrap();
        let b = t(vec![3], vec![0.5, -1.0, 2.0]);
        let y = conv2d_naive_oracle(&x, &w, &b, 1, Padding::Same).unwrap();
        for o in 0..3 {
            for &v in &y.data()[o * 16..(o + 1) * 16] {
                assert_eq!(v, b.data()[o]);
            }
        }
    }

    #[test]
    fn oracle_matches_strided_multichannel() {
        let mut rng = Rng::from_seed(3);
        let x = Tensor::<f64>::randn(vec![2, 3, 9, 9], &mut rng).unwrap();
        let w = Tensor::<f64>::randn(vec![4, 3, 3, 3], &mut rng).unwrap();
        let b = Tensor::<f64>::randn(vec![4], &mut rng).unwrap();
        for pad in [Padding::Same, Padding::Valid] {
            let fast = conv2d(&x, &w, &b, 2, pad).unwrap();
            let slow = conv2d_naive_oracle(&x, &w, &b, 2, pad).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
