//! Builders for the three networks: the six-block recognizer and the
//! generator / discriminator pair.

use std::cell::RefCell;

use crate::error::Result;
use crate::models::graph::{he_uniform, xavier_uniform, Layer, Mode, ModelGraph, Param, ParamRef};
use crate::ops::{ActKind, Padding};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BATCHNORM_MOMENTUM: f64 = 0.9;
pub const BATCHNORM_EPS: f64 = 1e-5;

/// One recognizer block: `convs` convolutions of `filters` kernels, each
/// followed by ReLU, then a 2x2 stride-2 max pool and a normalization layer.
#[derive(Clone, Copy, Debug)]
pub struct BlockSpec {
    pub convs: usize,
    pub filters: usize,
    pub kernel: usize,
}

#[derive(Clone, Debug)]
pub struct RecognizerSpec {
    pub blocks: Vec<BlockSpec>,
    pub fc1: usize,
    pub fc2: usize,
    pub classes: usize,
    pub dropout: f64,
}

impl Default for RecognizerSpec {
    fn default() -> Self {
        RecognizerSpec {
            blocks: vec![
                BlockSpec {
                    convs: 2,
                    filters: 32,
                    kernel: 2,
                },
                BlockSpec {
                    convs: 3,
                    filters: 64,
                    kernel: 3,
                },
                BlockSpec {
                    convs: 2,
                    filters: 128,
                    kernel: 5,
                },
                BlockSpec {
                    convs: 2,
                    filters: 256,
                    kernel: 5,
                },
                BlockSpec {
                    convs: 2,
                    filters: 384,
                    kernel: 5,
                },
                BlockSpec {
                    convs: 2,
                    filters: 512,
                    kernel: 5,
                },
            ],
            fc1: 1024,
            fc2: 5120,
            classes: 10,
            dropout: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    pub base_channels: usize,
    pub base_size: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            latent_dim: 100,
            base_channels: 128,
            base_size: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiscriminatorSpec {
    pub classes: usize,
    pub dropout: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            classes: 10,
            dropout: 0.25,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_layer<T: Scalar>(
    name: &str,
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: Padding,
    tanh_output: bool,
    rng: &mut Rng,
) -> Layer<T> {
    let fan_in = in_c * k * k;
    let shape = vec![out_c, in_c, k, k];
    let data = if tanh_output {
        xavier_uniform(shape.clone(), fan_in, out_c * k * k, rng)
    } else {
        he_uniform(shape.clone(), fan_in, rng)
    };
    Layer::Conv2d {
        weight: Param::new(format!("{name}.weight"), shape, data),
        bias: Param::new(format!("{name}.bias"), vec![out_c], vec![T::zero(); out_c]),
        stride,
        pad,
    }
}

fn dense_layer<T: Scalar>(name: &str, in_d: usize, out_d: usize, rng: &mut Rng) -> Layer<T> {
    Layer::Dense {
        weight: Param::new(
            format!("{name}.weight"),
            vec![in_d, out_d],
            he_uniform(vec![in_d, out_d], in_d, rng),
        ),
        bias: Param::new(format!("{name}.bias"), vec![out_d], vec![T::zero(); out_d]),
    }
}

/// Output-head dense layer with down-scaled weights so untrained logits sit
/// near zero and the head starts at its indifference point.
fn head_dense_layer<T: Scalar>(name: &str, in_d: usize, out_d: usize, rng: &mut Rng) -> Layer<T> {
    let scale = T::from_f64(0.1);
    let mut w = he_uniform::<T>(vec![in_d, out_d], in_d, rng);
    for v in &mut w {
        *v = *v * scale;
    }
    Layer::Dense {
        weight: Param::new(format!("{name}.weight"), vec![in_d, out_d], w),
        bias: Param::new(format!("{name}.bias"), vec![out_d], vec![T::zero(); out_d]),
    }
}

fn batchnorm_layer<T: Scalar>(name: &str, channels: usize) -> Layer<T> {
    Layer::BatchNorm {
        gamma: Param::new(
            format!("{name}.gamma"),
            vec![channels],
            vec![T::one(); channels],
        ),
        beta: Param::new(
            format!("{name}.beta"),
            vec![channels],
            vec![T::zero(); channels],
        ),
        running_mean: RefCell::new(vec![T::zero(); channels]),
        running_var: RefCell::new(vec![T::one(); channels]),
        momentum: T::from_f64(BATCHNORM_MOMENTUM),
        eps: T::from_f64(BATCHNORM_EPS),
    }
}

/// Six-block recognizer: (N, 1, 32, 32) -> (N, classes) probability rows.
pub fn build_recognizer<T: Scalar>(spec: &RecognizerSpec, rng: &mut Rng) -> ModelGraph<T> {
    let mut g = ModelGraph::new("recognizer");
    let mut in_c = 1;
    for (bi, block) in spec.blocks.iter().enumerate() {
        let b = bi + 1;
        for ci in 0..block.convs {
            let name = format!("block{b}.conv{}", ci + 1);
            g.push(
                name.clone(),
                conv_layer(
                    &format!("recognizer.{name}"),
                    in_c,
                    block.filters,
                    block.kernel,
                    1,
                    Padding::Same,
                    false,
                    rng,
                ),
            );
            g.push(
                format!("block{b}.relu{}", ci + 1),
                Layer::Activation(ActKind::Relu),
            );
            in_c = block.filters;
        }
        g.push(
            format!("block{b}.pool"),
            Layer::MaxPool {
                window: 2,
                stride: 2,
            },
        );
        g.push(
            format!("block{b}.norm"),
            batchnorm_layer(&format!("recognizer.block{b}.norm"), in_c),
        );
    }
    g.push("flatten", Layer::Flatten);
    g.push("fc1", dense_layer("recognizer.fc1", in_c, spec.fc1, rng));
    g.push("fc1.relu", Layer::Activation(ActKind::Relu));
    g.push("fc1.dropout", Layer::Dropout { rate: spec.dropout });
    g.push(
        "fc2",
        dense_layer("recognizer.fc2", spec.fc1, spec.fc2, rng),
    );
    g.push("fc2.relu", Layer::Activation(ActKind::Relu));
    g.push("fc2.dropout", Layer::Dropout { rate: spec.dropout });
    g.push(
        "fc3",
        head_dense_layer("recognizer.fc3", spec.fc2, spec.classes, rng),
    );
    g.push("softmax", Layer::Softmax);
    g
}

/// Generator: (N, latent) -> (N, 1, 32, 32) in (-1, 1).
pub fn build_generator<T: Scalar>(spec: &GeneratorSpec, rng: &mut Rng) -> ModelGraph<T> {
    let mut g = ModelGraph::new("generator");
    let c = spec.base_channels;
    let s = spec.base_size;
    g.push(
        "fc",
        dense_layer("generator.fc", spec.latent_dim, c * s * s, rng),
    );
    g.push("reshape", Layer::Reshape(vec![c, s, s]));
    g.push("norm1", batchnorm_layer("generator.norm1", c));
    g.push("up1", Layer::Upsample2x);
    g.push(
        "conv1",
        conv_layer("generator.conv1", c, 128, 3, 1, Padding::Same, false, rng),
    );
    g.push("conv1.relu", Layer::Activation(ActKind::Relu));
    g.push("norm2", batchnorm_layer("generator.norm2", 128));
    g.push("up2", Layer::Upsample2x);
    g.push(
        "conv2",
        conv_layer("generator.conv2", 128, 64, 3, 1, Padding::Same, false, rng),
    );
    g.push("conv2.relu", Layer::Activation(ActKind::Relu));
    g.push("norm3", batchnorm_layer("generator.norm3", 64));
    g.push(
        "conv3",
        conv_layer("generator.conv3", 64, 1, 3, 1, Padding::Same, true, rng),
    );
    g.push("tanh", Layer::Activation(ActKind::Tanh));
    g
}

/// Discriminator trunk plus two heads: validity (sigmoid) and class
/// (softmax over N+1, the extra unit being the fake class).
pub struct SganDiscriminator<T: Scalar> {
    pub trunk: ModelGraph<T>,
    pub validity: ModelGraph<T>,
    pub class: ModelGraph<T>,
}

impl<T: Scalar> SganDiscriminator<T> {
    pub fn set_mode(&self, mode: Mode) {
        self.trunk.set_mode(mode);
        self.validity.set_mode(mode);
        self.class.set_mode(mode);
    }

    pub fn params(&self) -> Vec<ParamRef<T>> {
        let mut out = self.trunk.params();
        out.extend(self.validity.params());
        out.extend(self.class.params());
        out
    }

    pub fn state_tensors(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut out = self.trunk.state_tensors();
        out.extend(self.validity.state_tensors());
        out.extend(self.class.state_tensors());
        out
    }

    pub fn load_state(&self, entries: &[(String, Vec<usize>, Vec<T>)]) -> Result<()> {
        self.trunk.load_state(entries)?;
        self.validity.load_state(entries)?;
        self.class.load_state(entries)
    }

    /// Forward to (validity (N, 1) in [0, 1], class (N, classes+1) rows).
    pub fn forward(&self, x: &Tensor<T>, rng: &mut Rng) -> Result<(Tensor<T>, Tensor<T>)> {
        let features = self.trunk.forward(x, rng)?;
        let validity = self.validity.forward(&features, rng)?;
        let class = self.class.forward(&features, rng)?;
        Ok((validity, class))
    }
}

pub fn build_discriminator<T: Scalar>(
    spec: &DiscriminatorSpec,
    rng: &mut Rng,
) -> SganDiscriminator<T> {
    let mut trunk = ModelGraph::new("discriminator");
    let filters = [32usize, 64, 128, 256];
    let mut in_c = 1;
    for (i, &f) in filters.iter().enumerate() {
        let n = i + 1;
        trunk.push(
            format!("conv{n}"),
            conv_layer(
                &format!("discriminator.conv{n}"),
                in_c,
                f,
                3,
                2,
                Padding::Same,
                false,
                rng,
            ),
        );
        trunk.push(
            format!("conv{n}.lrelu"),
            Layer::Activation(ActKind::LeakyRelu),
        );
        trunk.push(
            format!("conv{n}.dropout"),
            Layer::Dropout { rate: spec.dropout },
        );
        // batchnorm after the second and third convolutions only
        if n == 2 || n == 3 {
            trunk.push(
                format!("conv{n}.norm"),
                batchnorm_layer(&format!("discriminator.conv{n}.norm"), f),
            );
        }
        in_c = f;
    }
    trunk.push("flatten", Layer::Flatten);

    let flat = 256 * 2 * 2;
    let mut validity = ModelGraph::new("discriminator.validity");
    validity.push(
        "fc",
        head_dense_layer("discriminator.validity.fc", flat, 1, rng),
    );
    validity.push("sigmoid", Layer::Activation(ActKind::Sigmoid));

    let mut class = ModelGraph::new("discriminator.class");
    class.push(
        "fc",
        head_dense_layer("discriminator.class.fc", flat, spec.classes + 1, rng),
    );
    class.push("softmax", Layer::Softmax);

    SganDiscriminator {
        trunk,
        validity,
        class,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use crate::rng::Stream;

    /// Committed golden trace of the recognizer on a (1, 1, 32, 32) input:
    /// filter progression 32/64/128/256/384/512, spatial 32->16->8->4->2->1->1,
    /// heads 1024 -> 5120 -> 10.
    const GOLDEN_RECOGNIZER_TRACE: &[(&str, &[usize])] = &[
        ("block1.conv1", &[1, 32, 32, 32]),
        ("block1.conv2", &[1, 32, 32, 32]),
        ("block1.pool", &[1, 32, 16, 16]),
        ("block2.conv1", &[1, 64, 16, 16]),
        ("block2.conv2", &[1, 64, 16, 16]),
        ("block2.conv3", &[1, 64, 16, 16]),
        ("block2.pool", &[1, 64, 8, 8]),
        ("block3.conv1", &[1, 128, 8, 8]),
        ("block3.conv2", &[1, 128, 8, 8]),
        ("block3.pool", &[1, 128, 4, 4]),
        ("block4.conv1", &[1, 256, 4, 4]),
        ("block4.conv2", &[1, 256, 4, 4]),
        ("block4.pool", &[1, 256, 2, 2]),
        ("block5.conv1", &[1, 384, 2, 2]),
        ("block5.conv2", &[1, 384, 2, 2]),
        ("block5.pool", &[1, 384, 1, 1]),
        ("block6.conv1", &[1, 512, 1, 1]),
        ("block6.conv2", &[1, 512, 1, 1]),
        ("block6.pool", &[1, 512, 1, 1]),
        ("flatten", &[1, 512]),
        ("fc1", &[1, 1024]),
        ("fc2", &[1, 5120]),
        ("fc3", &[1, 10]),
    ];

    #[test]
    fn recognizer_trace_matches_golden() {
        let mut rng = Rng::from_seed(0);
        let g: ModelGraph<f32> = build_recognizer(&RecognizerSpec::default(), &mut rng);
        let trace = g.trace_shapes(&[1, 1, 32, 32]).unwrap();
        let by_name: std::collections::HashMap<&str, &[usize]> = trace
            .iter()
            .map(|(n, s)| (n.strip_prefix("recognizer.").unwrap(), s.as_slice()))
            .collect();
        for &(name, shape) in GOLDEN_RECOGNIZER_TRACE {
            assert_eq!(by_name[name], shape, "layer {name}");
        }
        // final feature map before flatten is (N, 512, 1, 1)
        assert_eq!(by_name["block6.pool"], &[1, 512, 1, 1]);
    }

    #[test]
    fn recognizer_trace_after_block2() {
        let mut rng = Rng::from_seed(0);
        let g: ModelGraph<f32> = build_recognizer(&RecognizerSpec::default(), &mut rng);
        let trace = g.trace_shapes(&[7, 1, 32, 32]).unwrap();
        let (_, shape) = trace
            .iter()
            .find(|(n, _)| n == "recognizer.block2.pool")
            .unwrap();
        assert_eq!(shape, &[7, 64, 8, 8]);
    }

    #[test]
    fn recognizer_accepts_28x28_via_ceil_pooling() {
        let mut rng = Rng::from_seed(0);
        let g: ModelGraph<f32> = build_recognizer(&RecognizerSpec::default(), &mut rng);
        let trace = g.trace_shapes(&[1, 1, 28, 28]).unwrap();
        let (_, shape) = trace
            .iter()
            .find(|(n, _)| n == "recognizer.block6.pool")
            .unwrap();
        assert_eq!(shape, &[1, 512, 1, 1]);
    }

    #[test]
    fn recognizer_forward_is_a_distribution() {
        let mut rng = Rng::from_stream(1, Stream::Init, 0);
        let g: ModelGraph<f32> = build_recognizer(&RecognizerSpec::default(), &mut rng);
        g.set_mode(Mode::Eval);
        let mut data_rng = Rng::from_seed(2);
        let x = Tensor::<f32>::randn(vec![1, 1, 32, 32], &mut data_rng).unwrap();
        let y = g.forward(&x, &mut data_rng).unwrap();
        assert_eq!(y.shape(), &[1, 10]);
        let sum: f32 = y.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn generator_shapes() {
        let mut rng = Rng::from_seed(3);
        let g: ModelGraph<f32> = build_generator(&GeneratorSpec::default(), &mut rng);
        let trace = g.trace_shapes(&[4, 100]).unwrap();
        assert_eq!(trace.last().unwrap().1, vec![4, 1, 32, 32]);
        assert!(trace.iter().any(|(_, s)| s == &[4, 128, 16, 16]));
        assert!(trace.iter().any(|(_, s)| s == &[4, 64, 32, 32]));
    }

    #[test]
    fn generator_output_within_tanh_range() {
        let mut rng = Rng::from_seed(4);
        let g: ModelGraph<f32> = build_generator(&GeneratorSpec::default(), &mut rng);
        let mut data_rng = Rng::from_seed(5);
        let z = Tensor::<f32>::randn(vec![4, 100], &mut data_rng).unwrap();
        let y = g.forward(&z, &mut data_rng).unwrap();
        assert_eq!(y.shape(), &[4, 1, 32, 32]);
        assert!(y.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn discriminator_heads_and_flatten_width() {
        let mut rng = Rng::from_seed(6);
        let d: SganDiscriminator<f32> =
            build_discriminator(&DiscriminatorSpec::default(), &mut rng);
        let trace = d.trunk.trace_shapes(&[2, 1, 32, 32]).unwrap();
        // spatial trace 32 -> 16 -> 8 -> 4 -> 2
        for (name, spatial) in [("conv1", 16), ("conv2", 8), ("conv3", 4), ("conv4", 2)] {
            let (_, s) = trace
                .iter()
                .find(|(n, _)| n == &format!("discriminator.{name}"))
                .unwrap();
            assert_eq!(s[2], spatial, "{name}");
        }
        assert_eq!(trace.last().unwrap().1, vec![2, 1024]);
        let mut data_rng = Rng::from_seed(7);
        let x = Tensor::<f32>::randn(vec![2, 1, 32, 32], &mut data_rng).unwrap();
        d.set_mode(Mode::Eval);
        let (v, c) = d.forward(&x, &mut data_rng).unwrap();
        assert_eq!(v.shape(), &[2, 1]);
        assert_eq!(c.shape(), &[2, 11]);
        assert!(v.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        for r in 0..2 {
            let sum: f32 = c.data()[r * 11..(r + 1) * 11].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rebuild_with_same_seed_is_bit_identical() {
        for build in [0u64, 1] {
            let mut a = Rng::from_stream(9, Stream::Init, build);
            let mut b = Rng::from_stream(9, Stream::Init, build);
            let ga: ModelGraph<f32> = build_recognizer(&RecognizerSpec::default(), &mut a);
            let gb: ModelGraph<f32> = build_recognizer(&RecognizerSpec::default(), &mut b);
            for (pa, pb) in ga.params().iter().zip(gb.params().iter()) {
                assert_eq!(pa.name(), pb.name());
                assert_eq!(pa.value().as_slice(), pb.value().as_slice());
            }
        }
    }

    #[test]
    fn untrained_recognizer_loss_is_near_ln10() {
        let mut rng = Rng::from_stream(10, Stream::Init, 0);
        let g: ModelGraph<f32> = build_recognizer(&RecognizerSpec::default(), &mut rng);
        g.set_mode(Mode::Eval);
        let mut data_rng = Rng::from_seed(11);
        let x = Tensor::<f32>::randn(vec![4, 1, 32, 32], &mut data_rng).unwrap();
        let y = g.forward(&x, &mut data_rng).unwrap();
        let mut t = vec![0.0f32; 4 * 10];
        for r in 0..4 {
            t[r * 10 + r] = 1.0;
        }
        let target = Tensor::from_vec(vec![4, 10], t).unwrap();
        let loss = ops::categorical_cross_entropy(&y, &target).unwrap();
        assert!(
            (loss.data()[0] - 10.0f32.ln()).abs() < 0.1,
            "loss {}",
            loss.data()[0]
        );
    }

    #[test]
    fn parameter_names_are_unique() {
        let mut rng = Rng::from_seed(12);
        let g: ModelGraph<f32> = build_recognizer(&RecognizerSpec::default(), &mut rng);
        let d: SganDiscriminator<f32> =
            build_discriminator(&DiscriminatorSpec::default(), &mut rng);
        let gen: ModelGraph<f32> = build_generator(&GeneratorSpec::default(), &mut rng);
        let mut names: Vec<String> = g.params().iter().map(|p| p.name().to_string()).collect();
        names.extend(d.params().iter().map(|p| p.name().to_string()));
        names.extend(gen.params().iter().map(|p| p.name().to_string()));
        let unique: std::collections::HashSet<&String> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }
}
