//! Batch normalization over channels of an (N, C, H, W) tensor.

use crate::error::{Error, Result};
use crate::ops::Op;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_bn<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    if x.shape().len() != 4 {
        return Err(Error::contract(format!(
            "batchnorm2d expects (N, C, H, W), got {:?}",
            x.shape()
        )));
    }
    let c = x.shape()[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "batchnorm2d",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    Ok(c)
}

/// Per-channel mean and biased variance over the N, H, W axes.
pub(crate) fn channel_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let m = T::from_f64((n * h * w) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let data = x.data();
    for img in 0..n {
        for ch in 0..c {
            let plane = &data[(img * c + ch) * h * w..(img * c + ch + 1) * h * w];
            let mut s = T::zero();
            for &v in plane {
                s = s + v;
            }
            mean[ch] = mean[ch] + s;
        }
    }
    for v in &mut mean {
        *v = *v / m;
    }
    for img in 0..n {
        for ch in 0..c {
            let plane = &data[(img * c + ch) * h * w..(img * c + ch + 1) * h * w];
            let mu = mean[ch];
            let mut s = T::zero();
            for &v in plane {
                let d = v - mu;
                s = s + d * d;
            }
            var[ch] = var[ch] + s;
        }
    }
    for v in &mut var {
        *v = *v / m;
    }
    (mean, var)
}

fn normalize<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: T,
) -> Vec<T> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = vec![T::zero(); x.len()];
    let data = x.data();
    for img in 0..n {
        for ch in 0..c {
            let inv = T::one() / (var[ch] + eps).sqrt();
            let (g, b, mu) = (gamma.data()[ch], beta.data()[ch], mean[ch]);
            let base = (img * c + ch) * h * w;
            for i in 0..h * w {
                out[base + i] = (data[base + i] - mu) * inv * g + b;
            }
        }
    }
    out
}

/// Train-mode batchnorm: normalizes with batch statistics and returns them so
/// the owning layer can update its running buffers.
pub fn batchnorm2d_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    check_bn(x, gamma, beta)?;
    let (mean, var) = channel_stats(x);
    let out = normalize(x, gamma, beta, &mean, &var, eps);
    let t = Tensor::from_op(
        x.shape().to_vec(),
        out,
        Op::BatchNorm2d {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            mean: mean.clone(),
            var: var.clone(),
            eps,
            train: true,
        },
    );
    Ok((t, mean, var))
}

/// Eval-mode batchnorm: running statistics only.
pub fn batchnorm2d_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    let c = check_bn(x, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::contract("running statistics length mismatch"));
    }
    let out = normalize(x, gamma, beta, running_mean, running_var, eps);
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        Op::BatchNorm2d {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            mean: running_mean.to_vec(),
            var: running_var.to_vec(),
            eps,
            train: false,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm2d_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: T,
    train: bool,
    g: &[T],
) -> Vec<(Tensor<T>, Vec<T>)> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let m = T::from_f64((n * h * w) as f64);
    let data = x.data();
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let inv = T::one() / (var[ch] + eps).sqrt();
        let mu = mean[ch];
        let gm = gamma.data()[ch];
        let mut sum_g = T::zero();
        let mut sum_g_xhat = T::zero();
        for img in 0..n {
            let base = (img * c + ch) * h * w;
            for i in 0..h * w {
                let xhat = (data[base + i] - mu) * inv;
                sum_g = sum_g + g[base + i];
                sum_g_xhat = sum_g_xhat + g[base + i] * xhat;
            }
        }
        dgamma[ch] = sum_g_xhat;
        dbeta[ch] = sum_g;
        if train {
            // dx = gamma*inv/m * (m*g - sum_g - xhat * sum_g_xhat)
            let k = gm * inv / m;
            for img in 0..n {
                let base = (img * c + ch) * h * w;
                for i in 0..h * w {
                    let xhat = (data[base + i] - mu) * inv;
                    dx[base + i] = k * (m * g[base + i] - sum_g - xhat * sum_g_xhat);
                }
            }
        } else {
            // statistics are constants in eval mode
            for img in 0..n {
                let base = (img * c + ch) * h * w;
                for i in 0..h * w {
                    dx[base + i] = g[base + i] * gm * inv;
                }
            }
        }
    }
    vec![
        (x.clone(), dx),
        (gamma.clone(), dgamma),
        (beta.clone(), dbeta),
    ]
}
