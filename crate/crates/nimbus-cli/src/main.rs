//! Command-line frontend: dataset synthesis, training, inference, single
//! evaluation, and the repeated-split experiment with report files.
//!
//! Exit codes are a stable contract: 0 success, 2 anything wrong with the
//! input or configuration, 3 numerical divergence during training.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nimbus_core::data::{self, Sample, WORKING_SIZE};
use nimbus_core::derive_seed;
use nimbus_core::error::Error;
use nimbus_core::experiment::{self, ExperimentConfig, SALT_INIT, SALT_SPLIT, SALT_TRAIN};
use nimbus_core::metrics::{self, LabelErrors, Thresholds};
use nimbus_core::trainer::{self, AdamParams, TrainConfig, TrainState};
use nimbus_core::unet::{self, UNetConfig, UNetParams};

#[derive(Parser)]
#[command(name = "nimbus", version, about = "Probabilistic sky/cloud segmentation on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network on the training side of one split and write a checkpoint
    Train(TrainArgs),
    /// Run a checkpoint on one image and write its rendered masks
    Infer(InferArgs),
    /// Score a checkpoint on the held-out side of one split
    Eval(EvalArgs),
    /// Run repeated fresh-split train/evaluate cycles and write report files
    Experiment(ExperimentArgs),
    /// Re-render a saved mask PNG as color images
    Render(RenderArgs),
    /// Write a synthetic dataset to disk: images, masks, and a manifest
    Synth(SynthArgs),
}

#[derive(Args)]
struct DatasetArgs {
    /// Tab-separated dataset manifest: image path, mask path, optional id
    #[arg(long, value_name = "PATH", conflicts_with = "synthetic")]
    manifest: Option<PathBuf>,
    /// Generate this many synthetic scenes in memory instead
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
}

impl DatasetArgs {
    /// Synthetic data derives from `seed` so every downstream artifact is a
    /// pure function of the command line.
    fn load(&self, seed: u64) -> Result<Vec<Sample>, Error> {
        match (&self.manifest, self.synthetic) {
            (Some(path), None) => data::load_manifest(path),
            (None, Some(n)) => Ok(data::synthetic_samples(n, seed)),
            _ => Err(Error::config("pass exactly one of --manifest and --synthetic")),
        }
    }
}

#[derive(Args)]
struct NetOpts {
    /// Pool/upsample levels in the network
    #[arg(long, default_value_t = UNetConfig::default().depth)]
    depth: usize,
    /// Channels at the first encoder level
    #[arg(long, default_value_t = UNetConfig::default().base_channels)]
    base_channels: usize,
}

impl NetOpts {
    fn config(&self, seed: u64) -> UNetConfig {
        UNetConfig { depth: self.depth, base_channels: self.base_channels, seed, ..UNetConfig::default() }
    }
}

#[derive(Args)]
struct TrainOpts {
    /// Passes over the training split
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = AdamParams::default().lr)]
    lr: f32,
    /// Minibatch size
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch: usize,
}

impl TrainOpts {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            adam: AdamParams { lr: self.lr, ..AdamParams::default() },
            seed,
        }
    }
}

#[derive(Args)]
struct ThresholdOpts {
    /// Below this cloudiness a pixel reads as clear sky
    #[arg(long, default_value_t = Thresholds::default().lower)]
    t1: f32,
    /// At or above this cloudiness a pixel reads as thick cloud
    #[arg(long, default_value_t = Thresholds::default().upper)]
    t2: f32,
}

impl ThresholdOpts {
    fn thresholds(&self) -> Result<Thresholds, Error> {
        let th = Thresholds { lower: self.t1, upper: self.t2 };
        th.validate()?;
        Ok(th)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    #[command(flatten)]
    net: NetOpts,
    #[command(flatten)]
    train: TrainOpts,
    /// Root seed for data synthesis, the split, initialization, and shuffling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of the dataset on the training side of the split
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    /// Checkpoint file to write
    #[arg(long, value_name = "PATH", default_value = "model.nmbs")]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint written by `train`
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Input photograph; resized to the working resolution
    #[arg(long, value_name = "PATH")]
    image: PathBuf,
    #[command(flatten)]
    thresholds: ThresholdOpts,
    /// Directory for prob.png, ternary.png, and mask.png
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[command(flatten)]
    dataset: DatasetArgs,
    #[command(flatten)]
    thresholds: ThresholdOpts,
    /// Root seed; must match the training command to score its held-out side
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of the dataset on the training side of the split
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    /// Evaluation batch size
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch: usize,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    #[command(flatten)]
    net: NetOpts,
    #[command(flatten)]
    train: TrainOpts,
    #[command(flatten)]
    thresholds: ThresholdOpts,
    /// Master seed; run i derives everything it does from seed + i
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent train/evaluate cycles
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// Fraction of the dataset on the training side of each split
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    /// Test hook: predict each held-out mask from its own ground truth
    #[arg(long)]
    oracle: bool,
    /// Add the per-image-averaged table to report.md
    #[arg(long)]
    verbose: bool,
    /// Directory for report.csv and report.md
    #[arg(long, value_name = "DIR", default_value = "report")]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    /// Mask PNG: 16-bit grayscale from `infer`, or an 8-bit dataset mask
    #[arg(long, value_name = "PATH")]
    mask: PathBuf,
    #[command(flatten)]
    thresholds: ThresholdOpts,
    /// Directory for prob.png and ternary.png
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Scenes to write
    #[arg(long, default_value_t = 32)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset directory; images/, masks/, and manifest.tsv go inside
    #[arg(long, value_name = "DIR", default_value = "synthetic")]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(&Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_non_finite() { 3 } else { 2 })
        }
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Experiment(args) => cmd_experiment(args),
        Command::Render(args) => cmd_render(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

fn cmd_train(args: &TrainArgs) -> Result<(), Error> {
    let samples = args.dataset.load(args.seed)?;
    let working: Vec<Sample> = samples.iter().map(Sample::to_working).collect();
    let (train_idx, test_idx) = data::random_split(working.len(), args.train_frac, derive_seed(args.seed, SALT_SPLIT))?;
    let train_samples: Vec<Sample> = train_idx.iter().map(|&i| working[i].clone()).collect();
    log::info!("training on {} samples, holding out {}", train_samples.len(), test_idx.len());

    let mut state = TrainState::new(UNetParams::init(&args.net.config(derive_seed(args.seed, SALT_INIT)))?);
    let stats = trainer::train(&mut state, &train_samples, &args.train.config(derive_seed(args.seed, SALT_TRAIN)))?;
    trainer::save_checkpoint(&args.out, &state)?;
    if let Some(last) = stats.last() {
        println!("final train loss {:.6} after {} epochs", last.mean_loss, last.epoch + 1);
    }
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn cmd_infer(args: &InferArgs) -> Result<(), Error> {
    let th = args.thresholds.thresholds()?;
    let state = trainer::load_checkpoint(&args.checkpoint)?;
    let image = data::load_image(&args.image)?.resized(WORKING_SIZE, WORKING_SIZE);
    let output = unet::forward(state.params(), &image.to_tensor())?;
    let mask = unet::mask_of(&output)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    metrics::save_probability_color(&args.out.join("prob.png"), &mask)?;
    metrics::save_probability_gray16(&args.out.join("mask.png"), &mask)?;
    metrics::save_ternary_color(&args.out.join("ternary.png"), &metrics::ternarize(&mask, &th))?;
    println!("wrote prob.png, ternary.png, mask.png to {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Error> {
    let th = args.thresholds.thresholds()?;
    let state = trainer::load_checkpoint(&args.checkpoint)?;
    let samples = args.dataset.load(args.seed)?;
    let working: Vec<Sample> = samples.iter().map(Sample::to_working).collect();
    let (_, test_idx) = data::random_split(working.len(), args.train_frac, derive_seed(args.seed, SALT_SPLIT))?;
    let (pooled, _) = experiment::evaluate(state.params(), &working, &test_idx, &th, args.batch)?;
    println!("held-out error over {} images: {}", test_idx.len(), errors_line(&pooled));
    Ok(())
}

fn cmd_experiment(args: &ExperimentArgs) -> Result<(), Error> {
    let samples = args.dataset.load(args.seed)?;
    let cfg = ExperimentConfig {
        runs: args.runs,
        train_frac: args.train_frac,
        master_seed: args.seed,
        net: args.net.config(0),
        train: args.train.config(0),
        thresholds: args.thresholds.thresholds()?,
        oracle: args.oracle,
    };
    let report = experiment::run_experiment(&samples, &cfg)?;
    experiment::write_report(&args.out, &report, &cfg, args.verbose)?;
    println!("mean over {} run(s): {}", report.runs.len(), errors_line(&report.mean));
    println!("reports written to {}", args.out.display());
    Ok(())
}

fn cmd_render(args: &RenderArgs) -> Result<(), Error> {
    let th = args.thresholds.thresholds()?;
    let mask = metrics::load_probability_mask(&args.mask)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    metrics::save_probability_color(&args.out.join("prob.png"), &mask)?;
    metrics::save_ternary_color(&args.out.join("ternary.png"), &metrics::ternarize(&mask, &th))?;
    println!("wrote prob.png, ternary.png to {}", args.out.display());
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<(), Error> {
    let manifest = data::write_synthetic_dataset(&args.out, args.count, args.seed)?;
    println!("wrote {} scenes, manifest at {}", args.count, manifest.display());
    Ok(())
}

fn errors_line(e: &LabelErrors) -> String {
    let cell = |v: Option<f64>| match v {
        Some(x) => format!("{x:.2}%"),
        None => "absent".to_string(),
    };
    format!("sky {} thin {} thick {}", cell(e.sky), cell(e.thin), cell(e.thick))
}
