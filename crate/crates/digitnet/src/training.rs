//! Training loops: supervised recognizer training with RMSprop and
//! alternating semi-supervised GAN training with Adam, plus evaluation.
//!
//! All randomness is derived per step from `(seed, stream, index)`, so a run
//! resumed from a checkpoint replays the exact batch, dropout, and latent
//! draws of an uninterrupted run.

use std::path::{Path, PathBuf};

use crate::checkpoint::{self, Entry};
use crate::data::{one_hot_rows, BatchIter, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{RecognizerRecord, SganRecord, Split};
use crate::models::{
    build_discriminator, build_generator, build_recognizer, DiscriminatorSpec, GeneratorSpec, Mode,
    ModelGraph, RecognizerSpec, SganDiscriminator,
};
use crate::ops;
use crate::optim::{Adam, RmsProp};
use crate::pgm;
use crate::rng::{Rng, Stream};
use crate::tensor::Tensor;

pub const CLASSES: usize = 10;
pub const FAKE_CLASS: usize = CLASSES;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub labeled_fraction: f64,
    pub eval_interval: u64,
    pub latent_dim: usize,
    pub sample_every: u64,
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 19550,
            batch_size: 64,
            lr: 0.001,
            seed: 0,
            labeled_fraction: 1.0,
            eval_interval: 500,
            latent_dim: 100,
            sample_every: 500,
            out_dir: None,
            resume: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::contract("steps must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::contract(format!(
                "labeled fraction {} must be in (0, 1]",
                self.labeled_fraction
            )));
        }
        if self.eval_interval < 1 || self.sample_every < 1 {
            return Err(Error::contract("intervals must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::contract(format!(
                "learning rate {} invalid",
                self.lr
            )));
        }
        Ok(())
    }
}

fn argmax_rows(probs: &Tensor<f32>) -> Vec<usize> {
    let k = probs.shape()[1];
    probs
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        })
        .collect()
}

fn accuracy(probs: &Tensor<f32>, labels: &[u8]) -> f64 {
    let hits = argmax_rows(probs)
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| p == l as usize)
        .count();
    hits as f64 / labels.len() as f64
}

/// Mean categorical cross-entropy and argmax accuracy over the full dataset.
/// Deterministic: eval mode, sequential batches.
pub fn evaluate(
    graph: &ModelGraph<f32>,
    dataset: &Dataset<f32>,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if dataset.count == 0 {
        return Err(Error::contract("cannot evaluate an empty dataset"));
    }
    let prev = graph.mode();
    graph.set_mode(Mode::Eval);
    let mut rng = Rng::from_stream(0, Stream::Dropout, 0);
    let mut loss_sum = 0.0;
    let mut hits = 0usize;
    let mut start = 0;
    while start < dataset.count {
        let end = (start + batch_size).min(dataset.count);
        let idx: Vec<usize> = (start..end).collect();
        let (x, y) = dataset.gather(&idx)?;
        let probs = graph.forward(&x, &mut rng)?;
        let target = one_hot_rows::<f32>(&y, CLASSES)?;
        let loss = ops::categorical_cross_entropy(&probs, &target)?;
        loss_sum += loss.data()[0] as f64 * idx.len() as f64;
        hits += argmax_rows(&probs)
            .iter()
            .zip(&y)
            .filter(|(&p, &l)| p == l as usize)
            .count();
        start = end;
    }
    graph.set_mode(prev);
    Ok((
        loss_sum / dataset.count as f64,
        hits as f64 / dataset.count as f64,
    ))
}

fn meta_step_entry(step: u64) -> Entry {
    ("meta.step".to_string(), vec![1], vec![step as f32])
}

fn read_meta_step(entries: &[Entry]) -> Result<u64> {
    entries
        .iter()
        .find(|e| e.0 == "meta.step")
        .map(|e| e.2[0] as u64)
        .ok_or_else(|| Error::Checkpoint("missing tensor meta.step".into()))
}

pub struct RecognizerOutcome {
    pub graph: ModelGraph<f32>,
    pub records: Vec<RecognizerRecord>,
    pub best_val_accuracy: Option<f64>,
    pub final_val_accuracy: Option<f64>,
}

/// Saves model, optimizer, and step counter as one checkpoint.
fn save_recognizer_state(
    path: &Path,
    graph: &ModelGraph<f32>,
    opt: &RmsProp<f32>,
    step: u64,
) -> Result<()> {
    let mut entries = graph.state_tensors();
    entries.extend(opt.state_tensors());
    entries.push(meta_step_entry(step));
    checkpoint::save_checkpoint(path, &entries)
}

pub fn recognizer_expected_names(graph: &ModelGraph<f32>, opt: &RmsProp<f32>) -> Vec<String> {
    let mut names: Vec<String> = graph.state_tensors().into_iter().map(|e| e.0).collect();
    names.extend(opt.state_tensors().into_iter().map(|e| e.0));
    names.push("meta.step".to_string());
    names
}

/// Runs exactly `config.steps` RMSprop updates with categorical
/// cross-entropy. Logs train loss every step and validation loss/accuracy
/// every `eval_interval` steps and at the final step. With `out_dir` set,
/// writes `last.ckpt` at each evaluation and `best.ckpt` on a validation
/// accuracy improvement.
pub fn train_recognizer(
    config: &TrainConfig,
    train: &Dataset<f32>,
    val: Option<&Dataset<f32>>,
) -> Result<RecognizerOutcome> {
    config.validate()?;
    let graph = build_recognizer(
        &RecognizerSpec::default(),
        &mut Rng::from_stream(config.seed, Stream::Init, 0),
    );
    let mut opt = RmsProp::new(graph.params(), config.lr);
    let mut iter = BatchIter::new(train.count, config.batch_size, config.seed, false)?;

    let mut start_step = 0u64;
    if let Some(ck) = &config.resume {
        let entries = checkpoint::load_checkpoint(ck)?;
        checkpoint::expect_names(&entries, &recognizer_expected_names(&graph, &opt))?;
        graph.load_state(&entries)?;
        opt.load_state(&entries)?;
        start_step = read_meta_step(&entries)?;
        iter.skip_batches(start_step);
    }

    let mut records = Vec::new();
    let mut best_val = None;
    let mut final_val = None;
    for step in start_step..config.steps {
        graph.set_mode(Mode::Train);
        let idx = iter.next_batch();
        let (x, y) = train.gather(&idx)?;
        let mut rng = Rng::from_stream(config.seed, Stream::Dropout, step);
        let probs = graph.forward(&x, &mut rng)?;
        let target = one_hot_rows::<f32>(&y, CLASSES)?;
        let loss = ops::categorical_cross_entropy(&probs, &target)?;
        let loss_v = loss.data()[0] as f64;
        if !loss_v.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at step {step}; last saved checkpoint is still valid"
            )));
        }
        loss.backward()?;
        opt.step()?;
        records.push(RecognizerRecord {
            step,
            split: Split::Train,
            loss: loss_v,
            accuracy: accuracy(&probs, &y),
        });

        let last = step + 1 == config.steps;
        if (step + 1) % config.eval_interval == 0 || last {
            if let Some(val) = val {
                let (vl, va) = evaluate(&graph, val, config.batch_size)?;
                records.push(RecognizerRecord {
                    step,
                    split: Split::Validation,
                    loss: vl,
                    accuracy: va,
                });
                final_val = Some(va);
                let improved = best_val.is_none_or(|b| va > b);
                if improved {
                    best_val = Some(va);
                }
                if let Some(dir) = &config.out_dir {
                    save_recognizer_state(&dir.join("last.ckpt"), &graph, &opt, step + 1)?;
                    if improved {
                        save_recognizer_state(&dir.join("best.ckpt"), &graph, &opt, step + 1)?;
                    }
                }
            } else if let Some(dir) = &config.out_dir {
                save_recognizer_state(&dir.join("last.ckpt"), &graph, &opt, step + 1)?;
            }
        }
    }
    Ok(RecognizerOutcome {
        graph,
        records,
        best_val_accuracy: best_val,
        final_val_accuracy: final_val,
    })
}

pub struct SganModels {
    pub generator: ModelGraph<f32>,
    pub discriminator: SganDiscriminator<f32>,
}

impl SganModels {
    pub fn build(seed: u64, latent_dim: usize) -> Self {
        let spec = GeneratorSpec {
            latent_dim,
            ..GeneratorSpec::default()
        };
        SganModels {
            generator: build_generator(&spec, &mut Rng::from_stream(seed, Stream::Init, 1)),
            discriminator: build_discriminator(
                &DiscriminatorSpec::default(),
                &mut Rng::from_stream(seed, Stream::Init, 2),
            ),
        }
    }
}

/// One alternating update. Phases 1 and 2 update the discriminator on the
/// real batch (validity target 1, class targets for the labeled prefix) and
/// on a detached fake batch (validity target 0, class target the fake
/// label); `d_loss` is the mean of the two composite losses. Phase 3 updates
/// only the generator against validity target 1; the discriminator optimizer
/// is never stepped there.
#[allow(clippy::too_many_arguments)]
pub fn sgan_train_step(
    models: &SganModels,
    x: &Tensor<f32>,
    y: &[u8],
    labeled: usize,
    latent_dim: usize,
    step_rng: (&mut Rng, &mut Rng),
    d_opt: &mut Adam<f32>,
    g_opt: &mut Adam<f32>,
) -> Result<(f64, f64, f64)> {
    let (latent_rng, dropout_rng) = step_rng;
    let b = x.shape()[0];
    let gen = &models.generator;
    let disc = &models.discriminator;
    gen.set_mode(Mode::Train);
    disc.set_mode(Mode::Train);

    let z = Tensor::<f32>::randn(vec![b, latent_dim], latent_rng)?;
    let fake = gen.forward(&z, dropout_rng)?.detach();

    // phase 1: discriminator on real
    let (validity_r, class_r) = disc.forward(x, dropout_rng)?;
    let ones = Tensor::full(vec![b, 1], 1.0f32)?;
    let mut real_comp = ops::binary_cross_entropy(&validity_r, &ones)?;
    if labeled > 0 {
        let rows: Vec<usize> = (0..labeled).collect();
        let class_sel = ops::select_rows(&class_r, &rows)?;
        let target = one_hot_rows::<f32>(&y[..labeled], CLASSES + 1)?;
        let class_loss = ops::categorical_cross_entropy(&class_sel, &target)?;
        real_comp = ops::add(&real_comp, &class_loss)?;
    }

    // phase 2: discriminator on fake
    let (validity_f, class_f) = disc.forward(&fake, dropout_rng)?;
    let zeros = Tensor::full(vec![b, 1], 0.0f32)?;
    let fake_labels = vec![FAKE_CLASS as u8; b];
    let fake_target = one_hot_rows::<f32>(&fake_labels, CLASSES + 1)?;
    let fake_comp = ops::add(
        &ops::binary_cross_entropy(&validity_f, &zeros)?,
        &ops::categorical_cross_entropy(&class_f, &fake_target)?,
    )?;

    let d_loss = ops::scale(&ops::add(&real_comp, &fake_comp)?, 0.5);
    let d_loss_v = d_loss.data()[0] as f64;
    if !d_loss_v.is_finite() {
        return Err(Error::NonFinite(
            "discriminator loss (phases 1-2)".to_string(),
        ));
    }
    d_loss.backward()?;
    d_opt.step()?;

    let real_hits = validity_r.data().iter().filter(|&&v| v > 0.5).count();
    let fake_hits = validity_f.data().iter().filter(|&&v| v < 0.5).count();
    let d_acc = (real_hits + fake_hits) as f64 / (2 * b) as f64;

    // phase 3: generator through the frozen discriminator
    let fake2 = gen.forward(&z, dropout_rng)?;
    let (validity_g, _) = disc.forward(&fake2, dropout_rng)?;
    let g_loss = ops::binary_cross_entropy(&validity_g, &ones)?;
    let g_loss_v = g_loss.data()[0] as f64;
    if !g_loss_v.is_finite() {
        return Err(Error::NonFinite("generator loss (phase 3)".to_string()));
    }
    g_loss.backward()?;
    g_opt.step()?;
    // gradients deposited on discriminator leaves are dropped when the next
    // forward pass creates fresh leaves

    Ok((d_loss_v, d_acc, g_loss_v))
}

pub struct SganOutcome {
    pub models: SganModels,
    pub records: Vec<SganRecord>,
    pub sample_paths: Vec<PathBuf>,
}

/// Writes a 16-image preview grid from a fixed latent batch.
pub fn write_preview_grid(
    gen: &ModelGraph<f32>,
    seed: u64,
    latent_dim: usize,
    path: &Path,
) -> Result<()> {
    let prev = gen.mode();
    gen.set_mode(Mode::Eval);
    let mut z_rng = Rng::from_stream(seed, Stream::Preview, 0);
    let z = Tensor::<f32>::randn(vec![16, latent_dim], &mut z_rng)?;
    let mut fwd_rng = Rng::from_stream(seed, Stream::Preview, 1);
    let imgs = gen.forward(&z, &mut fwd_rng)?;
    gen.set_mode(prev);
    pgm::write_image_grid(path, &imgs, 4)
}

/// Alternating SGAN training over `config.steps` updates. Preview grids are
/// written at step 0, every `sample_every` steps, and after the final step
/// when an output directory is set. With `labeled_fraction < 1`, only the
/// leading fraction of each shuffled batch contributes the class loss.
pub fn train_sgan(config: &TrainConfig, dataset: &Dataset<f32>) -> Result<SganOutcome> {
    config.validate()?;
    let models = SganModels::build(config.seed, config.latent_dim);
    let mut d_opt = Adam::new(models.discriminator.params(), config.lr);
    let mut g_opt = Adam::new(models.generator.params(), config.lr);
    let mut iter = BatchIter::new(dataset.count, config.batch_size, config.seed, true)?;
    let labeled = ((config.batch_size as f64) * config.labeled_fraction).ceil() as usize;

    let mut records = Vec::new();
    let mut sample_paths = Vec::new();
    let emit = |gen: &ModelGraph<f32>, step: u64, paths: &mut Vec<PathBuf>| -> Result<()> {
        if let Some(dir) = &config.out_dir {
            let p = dir.join(format!("samples_{step:06}.pgm"));
            write_preview_grid(gen, config.seed, config.latent_dim, &p)?;
            paths.push(p);
        }
        Ok(())
    };

    emit(&models.generator, 0, &mut sample_paths)?;
    for step in 0..config.steps {
        let idx = iter.next_batch();
        let (x, y) = dataset.gather(&idx)?;
        let mut latent_rng = Rng::from_stream(config.seed, Stream::Latent, step);
        let mut dropout_rng = Rng::from_stream(config.seed, Stream::Dropout, step);
        let (d_loss, d_acc, g_loss) = sgan_train_step(
            &models,
            &x,
            &y,
            labeled.min(x.shape()[0]),
            config.latent_dim,
            (&mut latent_rng, &mut dropout_rng),
            &mut d_opt,
            &mut g_opt,
        )
        .map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{m} at step {step}")),
            other => other,
        })?;
        records.push(SganRecord {
            step,
            d_loss,
            d_accuracy: d_acc,
            g_loss,
        });
        let last = step + 1 == config.steps;
        if (step + 1) % config.sample_every == 0 || last {
            emit(&models.generator, step + 1, &mut sample_paths)?;
        }
    }
    if let Some(dir) = &config.out_dir {
        let mut entries = models.generator.state_tensors();
        entries.extend(models.discriminator.state_tensors());
        entries.push(meta_step_entry(config.steps));
        checkpoint::save_checkpoint(dir.join("sgan.ckpt"), &entries)?;
    }
    Ok(SganOutcome {
        models,
        records,
        sample_paths,
    })
}
