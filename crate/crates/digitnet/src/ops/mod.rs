//! Differentiable operations: forward functions building the autograd graph
//! and the per-op backward rules.

mod conv;
mod loss;
mod norm;
mod pool;

pub use conv::{conv2d, conv2d_naive_oracle, conv2d_out_dims};
pub use loss::{binary_cross_entropy, categorical_cross_entropy, LOSS_CLAMP};
pub use norm::{batchnorm2d_eval, batchnorm2d_train};
pub use pool::{maxpool2d, maxpool2d_out_dims, upsample2x};

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{gemm_into, Mat, Scalar};
use crate::tensor::{Inner, Tensor};

/// Convolution padding mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size = ceil(input / stride); even kernels pad one less
    /// on top/left than on bottom/right.
    Same,
    /// No padding; windows must fit.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActKind {
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

pub(crate) enum Op<T: Scalar> {
    Add(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Scale(Tensor<T>, T),
    AddBias {
        x: Tensor<T>,
        bias: Tensor<T>,
    },
    Matmul {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    Reshape(Tensor<T>),
    SumAll(Tensor<T>),
    MeanAll(Tensor<T>),
    SelectRows {
        x: Tensor<T>,
        indices: Vec<usize>,
    },
    Relu(Tensor<T>),
    LeakyRelu(Tensor<T>, T),
    Tanh(Tensor<T>),
    Sigmoid(Tensor<T>),
    Softmax(Tensor<T>),
    Conv2d {
        x: Tensor<T>,
        w: Tensor<T>,
        b: Tensor<T>,
        stride: usize,
        pad: Padding,
    },
    MaxPool2d {
        x: Tensor<T>,
        argmax: Rc<Vec<usize>>,
    },
    BatchNorm2d {
        x: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
        train: bool,
    },
    Dropout {
        x: Tensor<T>,
        mask: Rc<Vec<T>>,
    },
    Upsample2x(Tensor<T>),
    CategoricalCrossEntropy {
        probs: Tensor<T>,
        target: Tensor<T>,
    },
    BinaryCrossEntropy {
        p: Tensor<T>,
        target: Tensor<T>,
    },
}

impl<T: Scalar> Op<T> {
    /// Differentiable inputs (loss targets are constants and excluded).
    pub(crate) fn inputs(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _) => vec![a],
            Op::AddBias { x, bias } => vec![x, bias],
            Op::Matmul { a, b } => vec![a, b],
            Op::Reshape(x)
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::Relu(x)
            | Op::LeakyRelu(x, _)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Softmax(x)
            | Op::Upsample2x(x) => vec![x],
            Op::SelectRows { x, .. } => vec![x],
            Op::Conv2d { x, w, b, .. } => vec![x, w, b],
            Op::MaxPool2d { x, .. } => vec![x],
            Op::BatchNorm2d { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Dropout { x, .. } => vec![x],
            Op::CategoricalCrossEntropy { probs, .. } => vec![probs],
            Op::BinaryCrossEntropy { p, .. } => vec![p],
        }
    }

    /// Maps the upstream gradient `g` (shape of the op's output) to per-input
    /// gradients.
    pub(crate) fn backward(&self, out: &Inner<T>, g: &[T]) -> Vec<(Tensor<T>, Vec<T>)> {
        match self {
            Op::Add(a, b) => vec![(a.clone(), g.to_vec()), (b.clone(), g.to_vec())],
            Op::Mul(a, b) => {
                let ga: Vec<T> = g.iter().zip(b.data()).map(|(&g, &b)| g * b).collect();
                let gb: Vec<T> = g.iter().zip(a.data()).map(|(&g, &a)| g * a).collect();
                vec![(a.clone(), ga), (b.clone(), gb)]
            }
            Op::Scale(a, c) => {
                let ga: Vec<T> = g.iter().map(|&g| g * *c).collect();
                vec![(a.clone(), ga)]
            }
            Op::AddBias { x, bias } => {
                let u = bias.len();
                let mut gb = vec![T::zero(); u];
                for (i, &gi) in g.iter().enumerate() {
                    gb[i % u] = gb[i % u] + gi;
                }
                vec![(x.clone(), g.to_vec()), (bias.clone(), gb)]
            }
            Op::Matmul { a, b } => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                // dA = g . B^T ; dB = A^T . g
                let mut ga = vec![T::zero(); m * k];
                gemm_into(
                    &mut ga,
                    false,
                    Mat::new(g, m, n),
                    Mat::new(b.data(), k, n).t(),
                );
                let mut gb = vec![T::zero(); k * n];
                gemm_into(
                    &mut gb,
                    false,
                    Mat::new(a.data(), m, k).t(),
                    Mat::new(g, m, n),
                );
                vec![(a.clone(), ga), (b.clone(), gb)]
            }
            Op::Reshape(x) => vec![(x.clone(), g.to_vec())],
            Op::SumAll(x) => vec![(x.clone(), vec![g[0]; x.len()])],
            Op::MeanAll(x) => {
                let scale = T::one() / T::from_f64(x.len() as f64);
                vec![(x.clone(), vec![g[0] * scale; x.len()])]
            }
            Op::SelectRows { x, indices } => {
                let cols = x.shape()[1];
                let mut gx = vec![T::zero(); x.len()];
                for (r, &src) in indices.iter().enumerate() {
                    for c in 0..cols {
                        gx[src * cols + c] = gx[src * cols + c] + g[r * cols + c];
                    }
                }
                vec![(x.clone(), gx)]
            }
            Op::Relu(x) => {
                let gx: Vec<T> = g
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(x.clone(), gx)]
            }
            Op::LeakyRelu(x, alpha) => {
                let gx: Vec<T> = g
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { g * *alpha })
                    .collect();
                vec![(x.clone(), gx)]
            }
            Op::Tanh(x) => {
                let gx: Vec<T> = g
                    .iter()
                    .zip(out.data.iter())
                    .map(|(&g, &y)| g * (T::one() - y * y))
                    .collect();
                vec![(x.clone(), gx)]
            }
            Op::Sigmoid(x) => {
                let gx: Vec<T> = g
                    .iter()
                    .zip(out.data.iter())
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect();
                vec![(x.clone(), gx)]
            }
            Op::Softmax(x) => {
                let k = x.shape()[1];
                let n = x.shape()[0];
                let y = &out.data;
                let mut gx = vec![T::zero(); n * k];
                for r in 0..n {
                    let row = r * k;
                    let mut dot = T::zero();
                    for j in 0..k {
                        dot = dot + g[row + j] * y[row + j];
                    }
                    for j in 0..k {
                        gx[row + j] = y[row + j] * (g[row + j] - dot);
                    }
                }
                vec![(x.clone(), gx)]
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => conv::conv2d_backward(x, w, b, *stride, *pad, g),
            Op::MaxPool2d { x, argmax } => {
                let mut gx = vec![T::zero(); x.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] = gx[src] + g[o];
                }
                vec![(x.clone(), gx)]
            }
            Op::BatchNorm2d {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                train,
            } => norm::batchnorm2d_backward(x, gamma, beta, mean, var, *eps, *train, g),
            Op::Dropout { x, mask } => {
                let gx: Vec<T> = g.iter().zip(mask.iter()).map(|(&g, &m)| g * m).collect();
                vec![(x.clone(), gx)]
            }
            Op::Upsample2x(x) => pool::upsample2x_backward(x, g),
            Op::CategoricalCrossEntropy { probs, target } => {
                loss::cce_backward(probs, target, g[0])
            }
            Op::BinaryCrossEntropy { p, target } => loss::bce_backward(p, target, g[0]),
        }
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        Op::Add(a.clone(), b.clone()),
    ))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        Op::Mul(a.clone(), b.clone()),
    ))
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    let data = a.data().iter().map(|&x| x * c).collect();
    Tensor::from_op(a.shape().to_vec(), data, Op::Scale(a.clone(), c))
}

/// Broadcast-adds a vector over the last axis.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let u = *x.shape().last().unwrap();
    if bias.shape() != [u] {
        return Err(Error::ShapeMismatch {
            op: "add_bias",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let b = bias.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + b[i % u])
        .collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        Op::AddBias {
            x: x.clone(),
            bias: bias.clone(),
        },
    ))
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut data = vec![T::zero(); m * n];
    gemm_into(
        &mut data,
        false,
        Mat::new(a.data(), m, k),
        Mat::new(b.data(), k, n),
    );
    Ok(Tensor::from_op(
        vec![m, n],
        data,
        Op::Matmul {
            a: a.clone(),
            b: b.clone(),
        },
    ))
}

/// Dense layer: x . w + bias.
pub fn dense<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    add_bias(&matmul(x, w)?, bias)
}

pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: Vec<usize>) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    if n != x.len() || shape.contains(&0) {
        return Err(Error::ShapeMismatch {
            op: "reshape",
            lhs: x.shape().to_vec(),
            rhs: shape,
        });
    }
    Ok(Tensor::from_op(
        shape,
        x.data().to_vec(),
        Op::Reshape(x.clone()),
    ))
}

/// Collapses all trailing axes: (N, ...) -> (N, rest).
pub fn flatten<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.shape()[0];
    reshape(x, vec![n, x.len() / n])
}

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.data().iter().copied().sum();
    Tensor::from_op(vec![1], vec![s], Op::SumAll(x.clone()))
}

pub fn mean_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s: T = x.data().iter().copied().sum();
    let m = s / T::from_f64(x.len() as f64);
    Tensor::from_op(vec![1], vec![m], Op::MeanAll(x.clone()))
}

/// Gathers rows of a 2-d tensor.
pub fn select_rows<T: Scalar>(x: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    if x.shape().len() != 2 {
        return Err(Error::contract("select_rows expects a 2-d tensor"));
    }
    if indices.is_empty() {
        return Err(Error::contract("select_rows needs at least one index"));
    }
    let (n, k) = (x.shape()[0], x.shape()[1]);
    let mut data = Vec::with_capacity(indices.len() * k);
    for &i in indices {
        if i >= n {
            return Err(Error::contract(format!(
                "select_rows index {i} out of range for {n} rows"
            )));
        }
        data.extend_from_slice(&x.data()[i * k..(i + 1) * k]);
    }
    Ok(Tensor::from_op(
        vec![indices.len(), k],
        data,
        Op::SelectRows {
            x: x.clone(),
            indices: indices.to_vec(),
        },
    ))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::from_op(x.shape().to_vec(), data, Op::Relu(x.clone()))
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, alpha: T) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { v * alpha })
        .collect();
    Tensor::from_op(x.shape().to_vec(), data, Op::LeakyRelu(x.clone(), alpha))
}

pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v.tanh()).collect();
    Tensor::from_op(x.shape().to_vec(), data, Op::Tanh(x.clone()))
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let one = T::one();
    let data = x.data().iter().map(|&v| one / (one + (-v).exp())).collect();
    Tensor::from_op(x.shape().to_vec(), data, Op::Sigmoid(x.clone()))
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: ActKind, leaky_slope: T) -> Tensor<T> {
    match kind {
        ActKind::Relu => relu(x),
        ActKind::LeakyRelu => leaky_relu(x, leaky_slope),
        ActKind::Tanh => tanh(x),
        ActKind::Sigmoid => sigmoid(x),
    }
}

/// Row-wise softmax with max subtraction for stability.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().len() != 2 {
        return Err(Error::contract(format!(
            "softmax expects (N, K) logits, got {:?}",
            x.shape()
        )));
    }
    let (n, k) = (x.shape()[0], x.shape()[1]);
    let mut data = vec![T::zero(); n * k];
    for r in 0..n {
        let row = &x.data()[r * k..(r + 1) * k];
        let max = row.iter().copied().fold(row[0], T::max);
        let mut sum = T::zero();
        for j in 0..k {
            let e = (row[j] - max).exp();
            data[r * k + j] = e;
            sum = sum + e;
        }
        for j in 0..k {
            data[r * k + j] = data[r * k + j] / sum;
        }
    }
    Ok(Tensor::from_op(vec![n, k], data, Op::Softmax(x.clone())))
}

/// Inverted dropout: survivors scaled by 1/(1-rate) at train time so that
/// inference is a pure pass-through.
pub fn dropout<T: Scalar>(
    x: &Tensor<T>,
    rate: f64,
    train: bool,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if !train || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let inv = T::from_f64(1.0 / keep);
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.bernoulli(keep) { inv } else { T::zero() })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        Op::Dropout {
            x: x.clone(),
            mask: Rc::new(mask),
        },
    ))
}
