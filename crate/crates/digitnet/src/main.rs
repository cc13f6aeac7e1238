//! Command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure. Option
//! precedence: command-line flags > JSON config file > built-in defaults.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use digitnet::checkpoint;
use digitnet::data::{load_dataset, Dataset, Rescale};
use digitnet::error::{Error, Result};
use digitnet::gradcheck;
use digitnet::metrics;
use digitnet::models::build_generator;
use digitnet::models::{build_recognizer, GeneratorSpec, Mode, RecognizerSpec};
use digitnet::pgm;
use digitnet::rng::{Rng, Stream};
use digitnet::synth;
use digitnet::tensor::Tensor;
use digitnet::training::{self, evaluate, TrainConfig};

#[derive(Parser)]
#[command(name = "digitnet", version, about = "Digit recognition and generation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the convolutional recognizer with RMSprop.
    TrainRecognizer(TrainRecognizerArgs),
    /// Train the semi-supervised GAN with Adam.
    TrainSgan(TrainSganArgs),
    /// Evaluate a recognizer checkpoint on the test split.
    Eval(EvalArgs),
    /// Sample a generator checkpoint into a PGM image grid.
    Generate(GenerateArgs),
    /// Run the finite-difference gradient suite over every layer.
    GradCheck,
    /// Write a synthetic IDX digit corpus.
    MakeDataset(MakeDatasetArgs),
}

#[derive(Args)]
struct CommonTrainArgs {
    /// Directory holding IDX files (train-images-idx3-ubyte and friends)
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Validation cadence in steps
    #[arg(long)]
    eval_interval: Option<u64>,
    /// Output directory for checkpoints, metrics, and the run manifest
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; flags given on the command line win
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cap the number of training samples (pilot runs)
    #[arg(long)]
    limit: Option<usize>,
    /// Write the run manifest and exit without training
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct TrainRecognizerArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    /// Resume from a checkpoint written by a previous run
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct TrainSganArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Fraction of each batch whose labels feed the class loss
    #[arg(long)]
    labeled_fraction: Option<f64>,
    /// Sample-grid cadence in steps
    #[arg(long)]
    sample_every: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 4)]
    columns: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output PGM path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MakeDatasetArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4000)]
    train: usize,
    #[arg(long, default_value_t = 1000)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Optional overrides loadable from --config JSON.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    steps: Option<u64>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    eval_interval: Option<u64>,
    latent_dim: Option<usize>,
    labeled_fraction: Option<f64>,
    sample_every: Option<u64>,
}

fn read_file_config(path: Option<&PathBuf>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&body).map_err(|e| Error::format(path, e.to_string()))
}

/// flags > config file > defaults
fn resolve_config(
    common: &CommonTrainArgs,
    file: &FileConfig,
    defaults: TrainConfig,
) -> TrainConfig {
    TrainConfig {
        steps: common.steps.or(file.steps).unwrap_or(defaults.steps),
        batch_size: common
            .batch_size
            .or(file.batch_size)
            .unwrap_or(defaults.batch_size),
        lr: common.lr.or(file.lr).unwrap_or(defaults.lr),
        seed: common.seed.or(file.seed).unwrap_or(defaults.seed),
        eval_interval: common
            .eval_interval
            .or(file.eval_interval)
            .unwrap_or(defaults.eval_interval),
        out_dir: Some(common.out.clone()),
        ..defaults
    }
}

fn config_json(config: &TrainConfig) -> serde_json::Value {
    serde_json::json!({
        "steps": config.steps,
        "batch_size": config.batch_size,
        "lr": config.lr,
        "seed": config.seed,
        "labeled_fraction": config.labeled_fraction,
        "eval_interval": config.eval_interval,
        "latent_dim": config.latent_dim,
        "sample_every": config.sample_every,
    })
}

fn write_manifest(dir: &Path, command: &str, seed: u64, body: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = serde_json::json!({
        "command": command,
        "seed": seed,
        "build": env!("CARGO_PKG_VERSION"),
        "config": body,
    });
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| Error::io(&path, e))
}

fn append_results(dir: &Path, results: serde_json::Value) -> Result<()> {
    let path = dir.join("run.json");
    let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut manifest: serde_json::Value =
        serde_json::from_str(&body).map_err(|e| Error::format(&path, e.to_string()))?;
    manifest["results"] = results;
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| Error::io(&path, e))
}

fn train_files(dir: &Path) -> (PathBuf, PathBuf) {
    (
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )
}

fn test_files(dir: &Path) -> (PathBuf, PathBuf) {
    (
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    )
}

fn load_split(dir: &Path, train: bool, mode: Rescale) -> Result<Dataset<f32>> {
    let (imgs, labels) = if train {
        train_files(dir)
    } else {
        test_files(dir)
    };
    load_dataset(imgs, labels, mode)
}

fn run_train_recognizer(args: &TrainRecognizerArgs) -> Result<()> {
    let file = read_file_config(args.common.config.as_ref())?;
    let mut config = resolve_config(&args.common, &file, TrainConfig::default());
    config.resume = args.resume.clone();
    config.validate()?;
    write_manifest(
        &args.common.out,
        "train-recognizer",
        config.seed,
        config_json(&config),
    )?;
    if args.common.dry_run {
        return Ok(());
    }
    let mut train = load_split(&args.common.data_dir, true, Rescale::Unit)?;
    if let Some(limit) = args.common.limit {
        train = train.take(limit);
    }
    let val = load_split(&args.common.data_dir, false, Rescale::Unit)?;
    let outcome = training::train_recognizer(&config, &train, Some(&val))?;
    metrics::write_recognizer_csv(args.common.out.join("metrics.csv"), &outcome.records)?;
    append_results(
        &args.common.out,
        serde_json::json!({
            "best_validation_accuracy": outcome.best_val_accuracy,
            "final_validation_accuracy": outcome.final_val_accuracy,
        }),
    )?;
    if let Some(acc) = outcome.final_val_accuracy {
        println!("final validation accuracy {acc:.4}");
    }
    Ok(())
}

fn run_train_sgan(args: &TrainSganArgs) -> Result<()> {
    let file = read_file_config(args.common.config.as_ref())?;
    let defaults = TrainConfig {
        steps: 300_000,
        batch_size: 64,
        lr: 0.002,
        ..TrainConfig::default()
    };
    let mut config = resolve_config(&args.common, &file, defaults);
    config.latent_dim = args
        .latent_dim
        .or(file.latent_dim)
        .unwrap_or(config.latent_dim);
    config.labeled_fraction = args
        .labeled_fraction
        .or(file.labeled_fraction)
        .unwrap_or(config.labeled_fraction);
    config.sample_every = args
        .sample_every
        .or(file.sample_every)
        .unwrap_or(config.sample_every);
    config.validate()?;
    write_manifest(
        &args.common.out,
        "train-sgan",
        config.seed,
        config_json(&config),
    )?;
    if args.common.dry_run {
        return Ok(());
    }
    let mut train = load_split(&args.common.data_dir, true, Rescale::Symmetric)?;
    if let Some(limit) = args.common.limit {
        train = train.take(limit);
    }
    let outcome = training::train_sgan(&config, &train)?;
    metrics::write_sgan_csv(args.common.out.join("metrics.csv"), &outcome.records)?;
    let last = outcome.records.last();
    append_results(
        &args.common.out,
        serde_json::json!({
            "final_d_loss": last.map(|r| r.d_loss),
            "final_g_loss": last.map(|r| r.g_loss),
            "sample_grids": outcome.sample_paths.len(),
        }),
    )?;
    if let Some(r) = last {
        println!(
            "final step {}: d_loss {:.4} g_loss {:.4}",
            r.step, r.d_loss, r.g_loss
        );
    }
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let entries = checkpoint::load_checkpoint(&args.checkpoint)?;
    let graph = build_recognizer(
        &RecognizerSpec::default(),
        &mut Rng::from_stream(0, Stream::Init, 0),
    );
    graph.load_state(&entries)?;
    graph.set_mode(Mode::Eval);
    let test = load_split(&args.data_dir, false, Rescale::Unit)?;
    let (loss, acc) = evaluate(&graph, &test, args.batch_size)?;
    println!(
        "loss {} accuracy {}",
        metrics::fmt_value(loss),
        metrics::fmt_value(acc)
    );
    Ok(())
}

fn run_generate(args: &GenerateArgs) -> Result<()> {
    if args.count == 0 || args.columns == 0 {
        return Err(Error::contract("count and columns must be at least 1"));
    }
    let entries = checkpoint::load_checkpoint(&args.checkpoint)?;
    // latent width is recoverable from the stored input layer
    let latent_dim = entries
        .iter()
        .find(|e| e.0 == "generator.fc.weight")
        .map(|e| e.1[0])
        .ok_or_else(|| Error::Checkpoint("checkpoint holds no generator".into()))?;
    let spec = GeneratorSpec {
        latent_dim,
        ..GeneratorSpec::default()
    };
    let gen = build_generator::<f32>(&spec, &mut Rng::from_stream(0, Stream::Init, 1));
    gen.load_state(&entries)?;
    gen.set_mode(Mode::Eval);
    let mut z_rng = Rng::from_stream(args.seed, Stream::Latent, 0);
    let z = Tensor::<f32>::randn(vec![args.count, latent_dim], &mut z_rng)?;
    let mut fwd_rng = Rng::from_stream(args.seed, Stream::Latent, 1);
    let imgs = gen.forward(&z, &mut fwd_rng)?;
    pgm::write_image_grid(&args.out, &imgs, args.columns)?;
    let dir = args.out.parent().filter(|p| !p.as_os_str().is_empty());
    write_manifest(
        dir.unwrap_or(Path::new(".")),
        "generate",
        args.seed,
        serde_json::json!({
            "checkpoint": args.checkpoint,
            "count": args.count,
            "columns": args.columns,
            "out": args.out,
        }),
    )?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn run_grad_check() -> Result<()> {
    let suite = gradcheck::layer_suite(1)?;
    let mut failed = 0;
    for entry in &suite {
        let status = if entry.passed() { "pass" } else { "FAIL" };
        println!(
            "{status}  {:<40} max_rel_err {:.3e} (tolerance {:.1e})",
            entry.name, entry.max_error, entry.tolerance
        );
        if !entry.passed() {
            failed += 1;
        }
    }
    println!("{} checks, {} failed", suite.len(), failed);
    if failed > 0 {
        return Err(Error::NonFinite(format!(
            "{failed} gradient checks exceeded tolerance"
        )));
    }
    Ok(())
}

fn run_make_dataset(args: &MakeDatasetArgs) -> Result<()> {
    if args.train == 0 || args.test == 0 {
        return Err(Error::contract("train and test counts must be at least 1"));
    }
    synth::write_corpus(&args.out, args.train, args.test, args.seed)?;
    write_manifest(
        &args.out,
        "make-dataset",
        args.seed,
        serde_json::json!({ "train": args.train, "test": args.test }),
    )?;
    println!(
        "wrote {} train / {} test images to {}",
        args.train,
        args.test,
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, everything else is usage
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.cmd {
        Cmd::TrainRecognizer(args) => run_train_recognizer(args),
        Cmd::TrainSgan(args) => run_train_sgan(args),
        Cmd::Eval(args) => run_eval(args),
        Cmd::Generate(args) => run_generate(args),
        Cmd::GradCheck => run_grad_check(),
        Cmd::MakeDataset(args) => run_make_dataset(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
