//! Finite-difference gradient checking (float64, central differences).

use crate::error::{Error, Result};
use crate::ops::{self, Padding};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Compares analytic gradients of `f` (a scalar-valued function of the given
/// inputs) against central differences with step `h`. Returns the max over
/// all elements of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let fresh = |bufs: &[Vec<f64>]| -> Result<Vec<Tensor<f64>>> {
        bufs.iter()
            .zip(inputs)
            .map(|(buf, t)| Tensor::from_vec(t.shape().to_vec(), buf.clone()))
            .collect()
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().to_vec()).collect();

    let leaves = fresh(&base)?;
    let loss = f(&leaves)?;
    if loss.len() != 1 {
        return Err(Error::contract(
            "grad_check requires a scalar-valued function",
        ));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.len()]))
        .collect();

    let mut worst = 0.0f64;
    for (ti, buf) in base.iter().enumerate() {
        for ei in 0..buf.len() {
            let mut plus = base.clone();
            plus[ti][ei] += h;
            let fp = f(&fresh(&plus)?)?.data()[0];
            let mut minus = base.clone();
            minus[ti][ei] -= h;
            let fm = f(&fresh(&minus)?)?.data()[0];
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti][ei];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Normal draws nudged away from zero so ReLU-family kinks stay clear of the
/// finite-difference step.
fn randn_off_kink(shape: Vec<usize>, rng: &mut Rng) -> Tensor<f64> {
    let t = Tensor::<f64>::randn(shape, rng).unwrap();
    let data = t
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { v + 0.2 } else { v - 0.2 })
        .collect();
    Tensor::from_vec(t.shape().to_vec(), data).unwrap()
}

/// Random tensor whose every pooling window has a clear argmax margin, so the
/// perturbation cannot flip the max.
fn randn_pool_safe(shape: Vec<usize>, window: usize, stride: usize, rng: &mut Rng) -> Tensor<f64> {
    'outer: loop {
        let t = Tensor::<f64>::randn(shape.clone(), rng).unwrap();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = ops::maxpool2d_out_dims(h, w, window, stride);
        for plane in 0..n * c {
            let img = &t.data()[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut vals: Vec<f64> = Vec::new();
                    for iy in (oy * stride)..(oy * stride + window).min(h) {
                        for ix in (ox * stride)..(ox * stride + window).min(w) {
                            vals.push(img[iy * w + ix]);
                        }
                    }
                    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    if vals.len() > 1 && vals[0] - vals[1] < 1e-3 {
                        continue 'outer;
                    }
                }
            }
        }
        return t;
    }
}

fn one_hot_rows(n: usize, k: usize, rng: &mut Rng) -> Tensor<f64> {
    let mut data = vec![0.0; n * k];
    for r in 0..n {
        data[r * k + rng.gen_range_usize(0, k)] = 1.0;
    }
    Tensor::from_vec(vec![n, k], data).unwrap()
}

pub struct SuiteEntry {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

/// Gradient checks for every layer, at several random shapes each.
pub fn layer_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = Rng::from_seed(seed);
    let mut out: Vec<SuiteEntry> = Vec::new();
    let tol = DEFAULT_TOLERANCE;
    let push = |name: String, err: f64, out: &mut Vec<SuiteEntry>| {
        out.push(SuiteEntry {
            name,
            max_error: err,
            tolerance: tol,
        });
    };

    // conv2d: both paddings, both strides, 5 shapes each
    let conv_shapes = [
        (1, 1, 5, 5, 1, 3, 3),
        (2, 2, 6, 6, 3, 2, 2),
        (1, 3, 7, 5, 2, 3, 3),
        (2, 1, 4, 4, 2, 1, 1),
        (1, 2, 8, 8, 2, 5, 5),
    ];
    for pad in [Padding::Same, Padding::Valid] {
        for stride in [1usize, 2] {
            let mut worst = 0.0f64;
            for &(n, c, h, w, oc, kh, kw) in &conv_shapes {
                let x = Tensor::<f64>::randn(vec![n, c, h, w], &mut rng)?;
                let wt = Tensor::<f64>::randn(vec![oc, c, kh, kw], &mut rng)?;
                let b = Tensor::<f64>::randn(vec![oc], &mut rng)?;
                let err = grad_check(
                    |ins| {
                        Ok(ops::mean_all(&ops::conv2d(
                            &ins[0], &ins[1], &ins[2], stride, pad,
                        )?))
                    },
                    &[x, wt, b],
                    DEFAULT_STEP,
                )?;
                worst = worst.max(err);
            }
            push(format!("conv2d {pad:?} stride {stride}"), worst, &mut out);
        }
    }

    // maxpool2d, ceil mode (odd extents exercise partial windows)
    let mut worst = 0.0f64;
    for shape in [
        [1, 1, 4, 4],
        [2, 2, 5, 5],
        [1, 3, 3, 7],
        [1, 1, 1, 1],
        [2, 1, 6, 3],
    ] {
        let x = randn_pool_safe(shape.to_vec(), 2, 2, &mut rng);
        let err = grad_check(
            |ins| Ok(ops::mean_all(&ops::maxpool2d(&ins[0], 2, 2)?)),
            &[x],
            DEFAULT_STEP,
        )?;
        worst = worst.max(err);
    }
    push("maxpool2d ceil".into(), worst, &mut out);

    // batchnorm2d, train mode
    let mut worst = 0.0f64;
    for shape in [
        [2, 1, 3, 3],
        [4, 2, 2, 2],
        [3, 3, 4, 4],
        [2, 2, 5, 3],
        [6, 1, 2, 2],
    ] {
        let c = shape[1];
        let x = Tensor::<f64>::randn(shape.to_vec(), &mut rng)?;
        let gamma = Tensor::<f64>::randn(vec![c], &mut rng)?;
        let beta = Tensor::<f64>::randn(vec![c], &mut rng)?;
        // project onto fixed random coefficients; the plain mean of a
        // normalized output is constant in x and would check nothing
        let coeffs = Tensor::<f64>::randn(shape.to_vec(), &mut rng)?;
        let err = grad_check(
            |ins| {
                let (y, _, _) = ops::batchnorm2d_train(&ins[0], &ins[1], &ins[2], 1e-5)?;
                Ok(ops::mean_all(&ops::mul(&y, &coeffs)?))
            },
            &[x, gamma, beta],
            DEFAULT_STEP,
        )?;
        worst = worst.max(err);
    }
    push("batchnorm2d train".into(), worst, &mut out);

    // dense
    let mut worst = 0.0f64;
    for (n, d, u) in [(1, 3, 2), (4, 5, 3), (2, 8, 8), (3, 1, 4), (5, 4, 1)] {
        let x = Tensor::<f64>::randn(vec![n, d], &mut rng)?;
        let w = Tensor::<f64>::randn(vec![d, u], &mut rng)?;
        let b = Tensor::<f64>::randn(vec![u], &mut rng)?;
        let err = grad_check(
            |ins| Ok(ops::mean_all(&ops::dense(&ins[0], &ins[1], &ins[2])?)),
            &[x, w, b],
            DEFAULT_STEP,
        )?;
        worst = worst.max(err);
    }
    push("dense".into(), worst, &mut out);

    // upsample2x
    let mut worst = 0.0f64;
    for shape in [
        [1, 1, 2, 2],
        [2, 3, 3, 3],
        [1, 2, 4, 1],
        [3, 1, 1, 5],
        [2, 2, 2, 4],
    ] {
        let x = Tensor::<f64>::randn(shape.to_vec(), &mut rng)?;
        let err = grad_check(
            |ins| Ok(ops::mean_all(&ops::upsample2x(&ins[0])?)),
            &[x],
            DEFAULT_STEP,
        )?;
        worst = worst.max(err);
    }
    push("upsample2x".into(), worst, &mut out);

    // activations (relu-family off kinks)
    for kind in ["relu", "leaky_relu", "tanh", "sigmoid"] {
        let mut worst = 0.0f64;
        for shape in [[1usize, 4], [3, 3], [2, 8], [5, 1], [4, 4]] {
            let x = match kind {
                "relu" | "leaky_relu" => randn_off_kink(shape.to_vec(), &mut rng),
                _ => Tensor::<f64>::randn(shape.to_vec(), &mut rng)?,
            };
            let err = grad_check(
                |ins| {
                    let y = match kind {
                        "relu" => ops::relu(&ins[0]),
                        "leaky_relu" => ops::leaky_relu(&ins[0], 0.2),
                        "tanh" => ops::tanh(&ins[0]),
                        _ => ops::sigmoid(&ins[0]),
                    };
                    Ok(ops::mean_all(&y))
                },
                &[x],
                DEFAULT_STEP,
            )?;
            worst = worst.max(err);
        }
        push(format!("activation {kind}"), worst, &mut out);
    }

    // softmax + categorical cross-entropy, fused with its head
    let mut worst = 0.0f64;
    for (n, k) in [(1, 3), (2, 10), (4, 11), (3, 2), (2, 5)] {
        let logits = Tensor::<f64>::randn(vec![n, k], &mut rng)?;
        let target = one_hot_rows(n, k, &mut rng);
        let err = grad_check(
            |ins| ops::categorical_cross_entropy(&ops::softmax(&ins[0])?, &target),
            &[logits],
            DEFAULT_STEP,
        )?;
        worst = worst.max(err);
    }
    push(
        "softmax + categorical cross-entropy".into(),
        worst,
        &mut out,
    );

    // sigmoid + binary cross-entropy, fused with its head
    let mut worst = 0.0f64;
    for n in [1usize, 4, 8, 3, 6] {
        let logits = Tensor::<f64>::randn(vec![n, 1], &mut rng)?;
        let mut tdata = vec![0.0; n];
        for v in tdata.iter_mut() {
            if rng.bernoulli(0.5) {
                *v = 1.0;
            }
        }
        let target = Tensor::from_vec(vec![n, 1], tdata)?;
        let err = grad_check(
            |ins| ops::binary_cross_entropy(&ops::sigmoid(&ins[0]), &target),
            &[logits],
            DEFAULT_STEP,
        )?;
        worst = worst.max(err);
    }
    push("sigmoid + binary cross-entropy".into(), worst, &mut out);

    Ok(out)
}
