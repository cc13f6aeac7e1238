use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ops::{self, ActKind, Padding};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A named, mutable parameter. Forward passes borrow the current value as a
/// zero-copy leaf tensor; the optimizer reads the gradient off that leaf and
/// swaps in a fresh buffer.
pub struct Param<T: Scalar> {
    name: String,
    shape: Vec<usize>,
    value: RefCell<Rc<Vec<T>>>,
    last_leaf: RefCell<Option<Tensor<T>>>,
}

pub type ParamRef<T> = Rc<Param<T>>;

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> ParamRef<T> {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        Rc::new(Param {
            name: name.into(),
            shape,
            value: RefCell::new(Rc::new(value)),
            last_leaf: RefCell::new(None),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn value(&self) -> Rc<Vec<T>> {
        Rc::clone(&self.value.borrow())
    }

    pub fn set_value(&self, v: Vec<T>) -> Result<()> {
        if v.len() != self.len() {
            return Err(Error::contract(format!(
                "parameter {}: value length {} does not match shape {:?}",
                self.name,
                v.len(),
                self.shape
            )));
        }
        *self.value.borrow_mut() = Rc::new(v);
        Ok(())
    }

    /// Fresh leaf tensor over the current value; recorded so that the
    /// optimizer can collect the gradient after backward.
    pub fn leaf(&self) -> Tensor<T> {
        let t = Tensor::from_shared(self.shape.clone(), self.value())
            .expect("parameter shape is valid by construction");
        *self.last_leaf.borrow_mut() = Some(t.clone());
        t
    }

    /// Gradient accumulated on the most recent forward's leaf, if any.
    pub fn take_grad(&self) -> Option<Vec<T>> {
        self.last_leaf.borrow().as_ref().and_then(|t| t.take_grad())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub enum Layer<T: Scalar> {
    Conv2d {
        weight: ParamRef<T>,
        bias: ParamRef<T>,
        stride: usize,
        pad: Padding,
    },
    Dense {
        weight: ParamRef<T>,
        bias: ParamRef<T>,
    },
    BatchNorm {
        gamma: ParamRef<T>,
        beta: ParamRef<T>,
        running_mean: RefCell<Vec<T>>,
        running_var: RefCell<Vec<T>>,
        momentum: T,
        eps: T,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Dropout {
        rate: f64,
    },
    Upsample2x,
    Activation(ActKind),
    Flatten,
    Reshape(Vec<usize>),
    Softmax,
}

/// Ordered composition of layers with a train/eval mode flag.
pub struct ModelGraph<T: Scalar> {
    name: String,
    layers: Vec<(String, Layer<T>)>,
    mode: Cell<Mode>,
}

impl<T: Scalar> ModelGraph<T> {
    pub fn new(name: impl Into<String>) -> Self {
        ModelGraph {
            name: name.into(),
            layers: Vec::new(),
            mode: Cell::new(Mode::Train),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn push(&mut self, layer_name: impl Into<String>, layer: Layer<T>) {
        self.layers.push((layer_name.into(), layer));
    }

    pub fn mode(&self) -> Mode {
        self.mode.get()
    }

    pub fn set_mode(&self, mode: Mode) {
        self.mode.set(mode);
    }

    pub fn params(&self) -> Vec<ParamRef<T>> {
        let mut out = Vec::new();
        for (_, layer) in &self.layers {
            match layer {
                Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias } => {
                    out.push(Rc::clone(weight));
                    out.push(Rc::clone(bias));
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.push(Rc::clone(gamma));
                    out.push(Rc::clone(beta));
                }
                _ => {}
            }
        }
        out
    }

    /// Every persistent tensor: parameters plus batchnorm running buffers.
    pub fn state_tensors(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut out = Vec::new();
        for (lname, layer) in &self.layers {
            match layer {
                Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias } => {
                    out.push((
                        weight.name().to_string(),
                        weight.shape().to_vec(),
                        weight.value().as_ref().clone(),
                    ));
                    out.push((
                        bias.name().to_string(),
                        bias.shape().to_vec(),
                        bias.value().as_ref().clone(),
                    ));
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    ..
                } => {
                    out.push((
                        gamma.name().to_string(),
                        gamma.shape().to_vec(),
                        gamma.value().as_ref().clone(),
                    ));
                    out.push((
                        beta.name().to_string(),
                        beta.shape().to_vec(),
                        beta.value().as_ref().clone(),
                    ));
                    let rm = running_mean.borrow();
                    out.push((
                        format!("{}.{lname}.running_mean", self.name),
                        vec![rm.len()],
                        rm.clone(),
                    ));
                    let rv = running_var.borrow();
                    out.push((
                        format!("{}.{lname}.running_var", self.name),
                        vec![rv.len()],
                        rv.clone(),
                    ));
                }
                _ => {}
            }
        }
        out
    }

    /// Restores parameters and running buffers from `(name, shape, data)`
    /// entries. Every state tensor of this graph must be present with a
    /// matching shape; names are matched exactly.
    pub fn load_state(&self, entries: &[(String, Vec<usize>, Vec<T>)]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &(String, Vec<usize>, Vec<T>)> =
            entries.iter().map(|e| (e.0.as_str(), e)).collect();
        let mut missing = Vec::new();
        let set_param = |p: &ParamRef<T>, missing: &mut Vec<String>| -> Result<()> {
            match lookup.get(p.name()) {
                Some((name, shape, data)) => {
                    if shape != p.shape() {
                        return Err(Error::Checkpoint(format!(
                            "tensor {name} has shape {shape:?}, expected {:?}",
                            p.shape()
                        )));
                    }
                    p.set_value(data.clone())
                }
                None => {
                    missing.push(p.name().to_string());
                    Ok(())
                }
            }
        };
        for (lname, layer) in &self.layers {
            match layer {
                Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias } => {
                    set_param(weight, &mut missing)?;
                    set_param(bias, &mut missing)?;
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    ..
                } => {
                    set_param(gamma, &mut missing)?;
                    set_param(beta, &mut missing)?;
                    for (buf, suffix) in
                        [(running_mean, "running_mean"), (running_var, "running_var")]
                    {
                        let key = format!("{}.{lname}.{suffix}", self.name);
                        match lookup.get(key.as_str()) {
                            Some((_, _, data)) => *buf.borrow_mut() = data.clone(),
                            None => missing.push(key),
                        }
                    }
                }
                _ => {}
            }
        }
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "missing tensors for graph {}: {}",
                self.name,
                missing.join(", ")
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor<T>, rng: &mut Rng) -> Result<Tensor<T>> {
        let train = self.mode.get() == Mode::Train;
        let mut x = input.clone();
        for (lname, layer) in &self.layers {
            x = match layer {
                Layer::Conv2d {
                    weight,
                    bias,
                    stride,
                    pad,
                } => ops::conv2d(&x, &weight.leaf(), &bias.leaf(), *stride, *pad)?,
                Layer::Dense { weight, bias } => ops::dense(&x, &weight.leaf(), &bias.leaf())?,
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    momentum,
                    eps,
                } => {
                    if train {
                        let (y, mean, var) =
                            ops::batchnorm2d_train(&x, &gamma.leaf(), &beta.leaf(), *eps)?;
                        let m = *momentum;
                        let one_m = T::one() - m;
                        {
                            let mut rm = running_mean.borrow_mut();
                            for (r, b) in rm.iter_mut().zip(&mean) {
                                *r = m * *r + one_m * *b;
                            }
                            let mut rv = running_var.borrow_mut();
                            for (r, b) in rv.iter_mut().zip(&var) {
                                *r = m * *r + one_m * *b;
                            }
                        }
                        y
                    } else {
                        ops::batchnorm2d_eval(
                            &x,
                            &gamma.leaf(),
                            &beta.leaf(),
                            &running_mean.borrow(),
                            &running_var.borrow(),
                            *eps,
                        )?
                    }
                }
                Layer::MaxPool { window, stride } => ops::maxpool2d(&x, *window, *stride)?,
                Layer::Dropout { rate } => ops::dropout(&x, *rate, train, rng)?,
                Layer::Upsample2x => ops::upsample2x(&x)?,
                Layer::Activation(kind) => ops::activation(&x, *kind, T::from_f64(0.2)),
                Layer::Flatten => ops::flatten(&x)?,
                Layer::Reshape(dims) => {
                    let n = x.shape()[0];
                    let mut shape = vec![n];
                    shape.extend_from_slice(dims);
                    ops::reshape(&x, shape)?
                }
                Layer::Softmax => ops::softmax(&x)?,
            };
            debug_assert!(x.all_finite(), "non-finite activation after {lname}");
        }
        Ok(x)
    }

    /// Static shape propagation without allocating tensor data. Errors name
    /// the first incompatible layer and both shapes.
    pub fn trace_shapes(&self, input: &[usize]) -> Result<Vec<(String, Vec<usize>)>> {
        let mut shape = input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (lname, layer) in &self.layers {
            let incompat = |expected: &str| {
                Error::contract(format!(
                    "layer {}.{lname} ({expected}) is incompatible with input shape {shape:?}",
                    self.name
                ))
            };
            shape = match layer {
                Layer::Conv2d {
                    weight,
                    stride,
                    pad,
                    ..
                } => {
                    let w = weight.shape();
                    if shape.len() != 4 || shape[1] != w[1] {
                        return Err(incompat(&format!("conv2d weights {w:?}")));
                    }
                    let (oh, ow, _, _) =
                        ops::conv2d_out_dims(shape[2], shape[3], w[2], w[3], *stride, *pad)?;
                    vec![shape[0], w[0], oh, ow]
                }
                Layer::Dense { weight, .. } => {
                    let w = weight.shape();
                    if shape.len() != 2 || shape[1] != w[0] {
                        return Err(incompat(&format!("dense weights {w:?}")));
                    }
                    vec![shape[0], w[1]]
                }
                Layer::BatchNorm { gamma, .. } => {
                    if shape.len() != 4 || shape[1] != gamma.shape()[0] {
                        return Err(incompat(&format!(
                            "batchnorm over {:?} channels",
                            gamma.shape()
                        )));
                    }
                    shape
                }
                Layer::MaxPool { window, stride } => {
                    if shape.len() != 4 {
                        return Err(incompat("maxpool2d"));
                    }
                    let (oh, ow) = ops::maxpool2d_out_dims(shape[2], shape[3], *window, *stride);
                    vec![shape[0], shape[1], oh, ow]
                }
                Layer::Dropout { .. } | Layer::Activation(_) => shape,
                Layer::Upsample2x => {
                    if shape.len() != 4 {
                        return Err(incompat("upsample2x"));
                    }
                    vec![shape[0], shape[1], 2 * shape[2], 2 * shape[3]]
                }
                Layer::Flatten => {
                    let n: usize = shape.iter().product();
                    vec![shape[0], n / shape[0]]
                }
                Layer::Reshape(dims) => {
                    let have: usize = shape.iter().skip(1).product();
                    let want: usize = dims.iter().product();
                    if have != want {
                        return Err(incompat(&format!("reshape to {dims:?}")));
                    }
                    let mut s = vec![shape[0]];
                    s.extend_from_slice(dims);
                    s
                }
                Layer::Softmax => {
                    if shape.len() != 2 {
                        return Err(incompat("softmax"));
                    }
                    shape
                }
            };
            out.push((format!("{}.{lname}", self.name), shape.clone()));
        }
        Ok(out)
    }
}

/// He-uniform initialization for ReLU-family layers.
pub(crate) fn he_uniform<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Vec<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let mut data = vec![T::zero(); n];
    rng.fill_uniform(&mut data, -limit, limit);
    data
}

/// Xavier-uniform initialization for tanh outputs.
pub(crate) fn xavier_uniform<T: Scalar>(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut Rng,
) -> Vec<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let mut data = vec![T::zero(); n];
    rng.fill_uniform(&mut data, -limit, limit);
    data
}
