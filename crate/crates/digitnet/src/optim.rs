//! RMSprop and Adam optimizers over named parameters.
//!
//! Both keep per-parameter moment buffers that are exported for
//! checkpointing under an `opt.` prefix. A non-finite gradient aborts the
//! step with the offending parameter's name.

use crate::error::{Error, Result};
use crate::models::ParamRef;
use crate::scalar::Scalar;

pub const RMSPROP_RHO: f64 = 0.9;
pub const RMSPROP_EPS: f64 = 1e-8;
pub const ADAM_BETA1: f64 = 0.5;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

fn check_finite<T: Scalar>(name: &str, grad: &[T]) -> Result<()> {
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of parameter {name} is not finite"
        )));
    }
    Ok(())
}

/// RMSprop: `v = rho*v + (1-rho)*g^2`, `theta -= lr * g / (sqrt(v) + eps)`.
pub struct RmsProp<T: Scalar> {
    params: Vec<ParamRef<T>>,
    lr: T,
    rho: T,
    eps: T,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(params: Vec<ParamRef<T>>, lr: f64) -> Self {
        let v = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        RmsProp {
            params,
            lr: T::from_f64(lr),
            rho: T::from_f64(RMSPROP_RHO),
            eps: T::from_f64(RMSPROP_EPS),
            v,
        }
    }

    /// Applies one update using the gradients left on each parameter's most
    /// recent leaf. Parameters that received no gradient are left unchanged.
    pub fn step(&mut self) -> Result<()> {
        for (p, v) in self.params.iter().zip(self.v.iter_mut()) {
            let Some(g) = p.take_grad() else { continue };
            check_finite(p.name(), &g)?;
            let mut theta = p.value().as_ref().clone();
            let one_rho = T::one() - self.rho;
            for ((t, vi), gi) in theta.iter_mut().zip(v.iter_mut()).zip(&g) {
                *vi = self.rho * *vi + one_rho * *gi * *gi;
                *t = *t - self.lr * *gi / (vi.sqrt() + self.eps);
            }
            p.set_value(theta)?;
        }
        Ok(())
    }

    pub fn state_tensors(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        self.params
            .iter()
            .zip(&self.v)
            .map(|(p, v)| (format!("opt.{}.v", p.name()), vec![v.len()], v.clone()))
            .collect()
    }

    pub fn load_state(&mut self, entries: &[(String, Vec<usize>, Vec<T>)]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &(String, Vec<usize>, Vec<T>)> =
            entries.iter().map(|e| (e.0.as_str(), e)).collect();
        for (p, v) in self.params.iter().zip(self.v.iter_mut()) {
            let key = format!("opt.{}.v", p.name());
            let Some((_, _, data)) = lookup.get(key.as_str()) else {
                return Err(Error::Checkpoint(format!("missing optimizer tensor {key}")));
            };
            if data.len() != v.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer tensor {key} has length {}, expected {}",
                    data.len(),
                    v.len()
                )));
            }
            v.clone_from(data);
        }
        Ok(())
    }
}

/// Adam with bias correction. The first-moment decay defaults to 0.5, the
/// value commonly used for GAN training.
pub struct Adam<T: Scalar> {
    params: Vec<ParamRef<T>>,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: Vec<ParamRef<T>>, lr: f64) -> Self {
        Adam::with_betas(params, lr, ADAM_BETA1, ADAM_BETA2)
    }

    pub fn with_betas(params: Vec<ParamRef<T>>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        let v = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        Adam {
            params,
            lr: T::from_f64(lr),
            beta1: T::from_f64(beta1),
            beta2: T::from_f64(beta2),
            eps: T::from_f64(ADAM_EPS),
            t: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (p, (m, v)) in self
            .params
            .iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let Some(g) = p.take_grad() else { continue };
            check_finite(p.name(), &g)?;
            let mut theta = p.value().as_ref().clone();
            let one_b1 = T::one() - self.beta1;
            let one_b2 = T::one() - self.beta2;
            for (((th, mi), vi), gi) in theta.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&g)
            {
                *mi = self.beta1 * *mi + one_b1 * *gi;
                *vi = self.beta2 * *vi + one_b2 * *gi * *gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *th = *th - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.set_value(theta)?;
        }
        Ok(())
    }

    pub fn state_tensors(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut out = vec![(
            "opt.t".to_string(),
            vec![1],
            vec![T::from_f64(self.t as f64)],
        )];
        for (p, (m, v)) in self.params.iter().zip(self.m.iter().zip(&self.v)) {
            out.push((format!("opt.{}.m", p.name()), vec![m.len()], m.clone()));
            out.push((format!("opt.{}.v", p.name()), vec![v.len()], v.clone()));
        }
        out
    }

    pub fn load_state(&mut self, entries: &[(String, Vec<usize>, Vec<T>)]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &(String, Vec<usize>, Vec<T>)> =
            entries.iter().map(|e| (e.0.as_str(), e)).collect();
        let Some((_, _, t)) = lookup.get("opt.t") else {
            return Err(Error::Checkpoint("missing optimizer tensor opt.t".into()));
        };
        self.t = t[0].to_f64() as u64;
        for (p, (m, v)) in self
            .params
            .iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (buf, suffix) in [(&mut *m, "m"), (&mut *v, "v")] {
                let key = format!("opt.{}.{suffix}", p.name());
                let Some((_, _, data)) = lookup.get(key.as_str()) else {
                    return Err(Error::Checkpoint(format!("missing optimizer tensor {key}")));
                };
                if data.len() != buf.len() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer tensor {key} has length {}, expected {}",
                        data.len(),
                        buf.len()
                    )));
                }
                buf.clone_from(data);
            }
        }
        Ok(())
    }
}
