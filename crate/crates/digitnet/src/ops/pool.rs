//! Ceil-mode max pooling and nearest-neighbor 2x upsampling.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ops::Op;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ceil-mode output extent: partial border windows still produce an output.
pub fn maxpool2d_out_dims(h: usize, w: usize, window: usize, stride: usize) -> (usize, usize) {
    let ext = |x: usize| {
        if x <= window {
            1
        } else {
            (x - window).div_ceil(stride) + 1
        }
    };
    (ext(h), ext(w))
}

/// Per-window maximum. Partial windows at the border pool over the elements
/// present; gradient routes to the first maximal element in row-major order.
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    if x.shape().len() != 4 {
        return Err(Error::contract(format!(
            "maxpool2d expects (N, C, H, W), got {:?}",
            x.shape()
        )));
    }
    if window == 0 || stride == 0 {
        return Err(Error::contract("maxpool2d window and stride must be >= 1"));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = maxpool2d_out_dims(h, w, window, stride);
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    let data = x.data();
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = oy * stride;
                    let x0 = ox * stride;
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for iy in y0..(y0 + window).min(h) {
                        for ix in x0..(x0 + window).min(w) {
                            let idx = base + iy * w + ix;
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((img * c + ch) * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        out,
        Op::MaxPool2d {
            x: x.clone(),
            argmax: Rc::new(argmax),
        },
    ))
}

/// Nearest-neighbor duplication of each pixel into a 2x2 block.
pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().len() != 4 {
        return Err(Error::contract(format!(
            "upsample2x expects (N, C, H, W), got {:?}",
            x.shape()
        )));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    let data = x.data();
    for plane in 0..n * c {
        let src = &data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..h {
            for x_ in 0..w {
                let v = src[y * w + x_];
                let b = 2 * y * ow + 2 * x_;
                dst[b] = v;
                dst[b + 1] = v;
                dst[b + ow] = v;
                dst[b + ow + 1] = v;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        out,
        Op::Upsample2x(x.clone()),
    ))
}

/// Backward of upsample2x: each input cell receives the sum of its 2x2 block.
pub(crate) fn upsample2x_backward<T: Scalar>(x: &Tensor<T>, g: &[T]) -> Vec<(Tensor<T>, Vec<T>)> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ow = 2 * w;
    let mut gx = vec![T::zero(); x.len()];
    for plane in 0..n * c {
        let src = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x_ in 0..w {
                let b = 2 * y * ow + 2 * x_;
                dst[y * w + x_] = src[b] + src[b + 1] + src[b + ow] + src[b + ow + 1];
            }
        }
    }
    vec![(x.clone(), gx)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::sum_all;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn hand_maximum() {
        let x = t(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn constant_map_halves_extents() {
        let x = Tensor::<f64>::full(vec![1, 2, 6, 6], 3.5).unwrap();
        let y = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn thirty_two_to_sixteen() {
        let x = Tensor::<f32>::zeros(vec![1, 1, 32, 32]).unwrap();
        let y = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 16, 16]);
    }

    #[test]
    fn one_by_one_is_identity() {
        let x = t(vec![1, 1, 1, 1], vec![7.0]);
        let y = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn odd_extent_pools_partial_window() {
        let x = t(
            vec![1, 1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        );
        let y = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn tie_routes_gradient_to_first_in_row_major_order() {
        let x = t(vec![1, 1, 2, 2], vec![4.0, 4.0, 4.0, 4.0]);
        let y = maxpool2d(&x, 2, 2).unwrap();
        sum_all(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_definition_expansion() {
        let x = t(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = upsample2x(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let x = t(vec![1, 1, 1, 2], vec![1.0, 2.0]);
        let y = upsample2x(&x).unwrap();
        sum_all(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 4.0]);
    }
}
