//! Cross-entropy losses. Probabilities are clamped to
//! `[LOSS_CLAMP, 1 - LOSS_CLAMP]` before the log; the clamp regions have zero
//! gradient.

use crate::error::{Error, Result};
use crate::ops::Op;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LOSS_CLAMP: f64 = 1e-7;

fn clamp<T: Scalar>(v: T) -> T {
    let lo = T::from_f64(LOSS_CLAMP);
    let hi = T::one() - lo;
    v.max(lo).min(hi)
}

fn in_clamp_range<T: Scalar>(v: T) -> bool {
    let lo = T::from_f64(LOSS_CLAMP);
    v > lo && v < T::one() - lo
}

/// Mean over the batch of `-sum(target * log(prob))`. `target` rows must be
/// one-hot; `probs` rows must sum to 1 within 1e-5.
pub fn categorical_cross_entropy<T: Scalar>(
    probs: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<Tensor<T>> {
    if probs.shape().len() != 2 || probs.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "categorical_cross_entropy",
            lhs: probs.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    for r in 0..n {
        let prow = &probs.data()[r * k..(r + 1) * k];
        let sum: T = prow.iter().copied().sum();
        if (sum - T::one()).abs() > T::from_f64(1e-5) {
            return Err(Error::contract(format!(
                "probability row {r} sums to {sum}, expected 1"
            )));
        }
        let trow = &target.data()[r * k..(r + 1) * k];
        let ones = trow.iter().filter(|&&v| v == T::one()).count();
        let zeros = trow.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::contract(format!("target row {r} is not one-hot")));
        }
    }
    let mut total = T::zero();
    for (p, t) in probs.data().iter().zip(target.data()) {
        if *t == T::one() {
            total = total - clamp(*p).ln();
        }
    }
    let loss = total / T::from_f64(n as f64);
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        Op::CategoricalCrossEntropy {
            probs: probs.clone(),
            target: target.clone(),
        },
    ))
}

pub(crate) fn cce_backward<T: Scalar>(
    probs: &Tensor<T>,
    target: &Tensor<T>,
    g0: T,
) -> Vec<(Tensor<T>, Vec<T>)> {
    let n = T::from_f64(probs.shape()[0] as f64);
    let gp: Vec<T> = probs
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            if t == T::one() && in_clamp_range(p) {
                -g0 / (p * n)
            } else {
                T::zero()
            }
        })
        .collect();
    vec![(probs.clone(), gp)]
}

/// Mean of `-(t*log(p) + (1-t)*log(1-p))`; targets must be exactly 0 or 1.
pub fn binary_cross_entropy<T: Scalar>(p: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if p.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "binary_cross_entropy",
            lhs: p.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    for (i, &t) in target.data().iter().enumerate() {
        if t != T::zero() && t != T::one() {
            return Err(Error::contract(format!(
                "binary target element {i} is {t}, expected 0 or 1"
            )));
        }
    }
    for (i, &v) in p.data().iter().enumerate() {
        if v < -T::from_f64(1e-6) || v > T::one() + T::from_f64(1e-6) {
            return Err(Error::contract(format!(
                "probability element {i} is {v}, outside [0, 1]"
            )));
        }
    }
    let mut total = T::zero();
    for (&pv, &t) in p.data().iter().zip(target.data()) {
        if t == T::one() {
            total = total - clamp(pv).ln();
        } else {
            total = total - clamp(T::one() - pv).ln();
        }
    }
    let loss = total / T::from_f64(p.len() as f64);
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        Op::BinaryCrossEntropy {
            p: p.clone(),
            target: target.clone(),
        },
    ))
}

pub(crate) fn bce_backward<T: Scalar>(
    p: &Tensor<T>,
    target: &Tensor<T>,
    g0: T,
) -> Vec<(Tensor<T>, Vec<T>)> {
    let n = T::from_f64(p.len() as f64);
    let gp: Vec<T> = p
        .data()
        .iter()
        .zip(target.data())
        .map(|(&pv, &t)| {
            if t == T::one() {
                if in_clamp_range(pv) {
                    -g0 / (pv * n)
                } else {
                    T::zero()
                }
            } else if in_clamp_range(T::one() - pv) {
                g0 / ((T::one() - pv) * n)
            } else {
                T::zero()
            }
        })
        .collect();
    vec![(p.clone(), gp)]
}
