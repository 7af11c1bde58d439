//! Command-line front end: train models, generate PGD adversarial batches,
//! prune, fine-tune, quantize, evaluate, run full sweeps, and export weight
//! histograms.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gap_core::attack::{adversarial_accuracy, pgd, surrogate_gradient_attack, AttackSpec};
use gap_core::checkpoint;
use gap_core::data::{load_idx, synthetic_blobs, BlobSpec, Dataset, Split};
use gap_core::harness::{self, export_histogram, ExperimentConfig};
use gap_core::model::{clean_accuracy, Architecture, Model};
use gap_core::prune::{prune, PruneMethod, PruneScope, PruneSpec};
use gap_core::quant::quantize_model;
use gap_core::seed;
use gap_core::train::{finetune, train, TrainMode};

#[derive(Parser)]
#[command(name = "gap", version, about = "Pruning vs adversarial robustness toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from scratch and write a checkpoint.
    Train(TrainArgs),
    /// Generate a PGD adversarial batch against a model.
    Attack(AttackArgs),
    /// Single-shot prune of a trained model.
    Prune(PruneArgs),
    /// Fine-tune a pruned model (masks stay fixed).
    Finetune(FinetuneArgs),
    /// Post-training 8-bit quantization of a checkpoint.
    Quantize(QuantizeArgs),
    /// Evaluate clean / adversarial / transfer accuracy.
    Eval(EvalArgs),
    /// Run the full experiment matrix from a config file.
    Sweep(SweepArgs),
    /// Export a histogram of kept weight values.
    Hist(HistArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Blobs,
    Idx,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Dataset selection shared by the data-consuming subcommands.
#[derive(Args)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "blobs")]
    data: DataKind,
    /// Blob classes.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Blob samples per class.
    #[arg(long, default_value_t = 150)]
    per_class: usize,
    /// Blob image shape as CxHxW.
    #[arg(long, default_value = "1x16x16")]
    image_shape: String,
    /// Blob pixel-noise standard deviation.
    #[arg(long, default_value_t = 0.30)]
    noise: f32,
    /// Blob bump radius as a fraction of min(H, W).
    #[arg(long, default_value_t = 0.13)]
    sigma_frac: f32,
    /// Blob bump height above the background level.
    #[arg(long, default_value_t = 0.22)]
    amplitude: f32,
    /// Blob background gray level.
    #[arg(long, default_value_t = 0.5)]
    background: f32,
    /// Seed for blob generation (defaults to a value derived from --seed).
    #[arg(long)]
    data_seed: Option<u64>,
    /// IDX image file (with --data idx).
    #[arg(long)]
    images: Option<PathBuf>,
    /// IDX label file (with --data idx).
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
}

impl DataArgs {
    fn build(&self, fallback_seed: u64) -> anyhow::Result<Dataset> {
        match self.data {
            DataKind::Blobs => {
                let dims: Vec<usize> = self
                    .image_shape
                    .split('x')
                    .map(|p| p.parse().context("image shape must be CxHxW"))
                    .collect::<anyhow::Result<_>>()?;
                if dims.len() != 3 {
                    bail!("--image-shape must have three components, got {:?}", self.image_shape);
                }
                let spec = BlobSpec {
                    num_classes: self.classes,
                    per_class: self.per_class,
                    image_shape: (dims[0], dims[1], dims[2]),
                    noise: self.noise,
                    sigma_frac: self.sigma_frac,
                    amplitude: self.amplitude,
                    background: self.background,
                    seed: self.data_seed.unwrap_or_else(|| seed::derive(fallback_seed, "dataset")),
                };
                Ok(synthetic_blobs(&spec, self.split.into())?)
            }
            DataKind::Idx => {
                let images = self.images.as_ref().context("--images required with --data idx")?;
                let labels = self.labels.as_ref().context("--labels required with --data idx")?;
                Ok(load_idx(images, labels, self.split.into())?)
            }
        }
    }
}

/// PGD parameters shared by attack-running subcommands.
#[derive(Args)]
struct AttackFlags {
    #[arg(long, default_value_t = 8.0 / 255.0)]
    epsilon: f32,
    #[arg(long, default_value_t = 2.0 / 255.0)]
    alpha: f32,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Disable the uniform random start.
    #[arg(long)]
    no_random_start: bool,
    #[arg(long, default_value_t = 0.0)]
    clip_min: f32,
    #[arg(long, default_value_t = 1.0)]
    clip_max: f32,
}

impl AttackFlags {
    fn to_spec(&self, attack_seed: u64) -> AttackSpec {
        AttackSpec {
            epsilon: self.epsilon,
            alpha: self.alpha,
            steps: self.steps,
            random_start: !self.no_random_start,
            clip_min: self.clip_min,
            clip_max: self.clip_max,
            seed: attack_seed,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Architecture id: MiniCNN or MLP-784-128-64-10.
    #[arg(long, default_value = "MiniCNN")]
    arch: String,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f32,
    /// Comma-separated schedule fractions at which lr divides by 10.
    #[arg(long, default_value = "0.25,0.5")]
    drops: String,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f32,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[command(flatten)]
    data: DataArgs,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-epoch CSV log path.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Samples drawn (seeded) from the dataset.
    #[arg(long, default_value_t = 1024)]
    samples: usize,
    #[command(flatten)]
    attack: AttackFlags,
    #[command(flatten)]
    data: DataArgs,
    /// Output adversarial-batch container.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    method: String,
    #[arg(long, default_value = "global")]
    scope: String,
    #[arg(long)]
    compression: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 2048)]
    score_samples: usize,
    #[arg(long, default_value_t = 256)]
    score_batch: usize,
    #[command(flatten)]
    attack: AttackFlags,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Also write the mask set as a standalone container.
    #[arg(long)]
    mask_out: Option<PathBuf>,
    /// Also export the pre-finetune kept-weight histogram.
    #[arg(long)]
    hist_out: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    bins: usize,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f32,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f32,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Full-precision checkpoint, or a -q8 checkpoint with --quantized.
    #[arg(long)]
    model: PathBuf,
    /// Treat --model as a quantized checkpoint.
    #[arg(long)]
    quantized: bool,
    /// Evaluate accuracy on an existing adversarial batch.
    #[arg(long)]
    adv: Option<PathBuf>,
    /// Generate a fresh self-adversarial batch (requires --seed).
    #[arg(long)]
    self_attack: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1024)]
    samples: usize,
    #[command(flatten)]
    attack: AttackFlags,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment config (TOML).
    #[arg(long, required_unless_present = "write_default")]
    config: Option<PathBuf>,
    /// Write the default desk-scale config to this path and exit.
    #[arg(long)]
    write_default: Option<PathBuf>,
    /// Seed used when writing the default config.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory used when writing the default config.
    #[arg(long, default_value = "runs/desk")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct HistArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 64)]
    bins: usize,
    /// Bin range as lo,hi (defaults to the observed kept-weight range).
    #[arg(long)]
    range: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_drops(text: &str) -> anyhow::Result<Vec<f64>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|p| p.trim().parse::<f64>().context("lr drop fractions must be numbers"))
        .collect()
}

fn run() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::Train(args) => {
            let dataset = args.data.build(args.seed)?;
            let arch = Architecture::from_id(&args.arch, dataset.sample_shape(), dataset.num_classes())?;
            let mut model = Model::new(arch, seed::derive(args.seed, "init"));
            model.name = format!("{}#s{}", args.arch, args.seed);
            let cfg = gap_core::train::TrainConfig {
                epochs: args.epochs,
                base_lr: args.lr,
                lr_drop_points: parse_drops(&args.drops)?,
                weight_decay: args.weight_decay,
                batch_size: args.batch_size,
                seed: seed::derive(args.seed, "train"),
                mode: TrainMode::Train,
            };
            let log = train(&mut model, &dataset, &cfg)?;
            if let Some(path) = &args.log {
                std::fs::write(path, log.to_csv())?;
            }
            checkpoint::save_model(&model, None, &args.out)?;
            if let Some(row) = log.rows.last() {
                println!(
                    "trained {} epochs: loss {:.4} accuracy {:.4} -> {}",
                    args.epochs,
                    row.loss,
                    row.accuracy,
                    args.out.display()
                );
            } else {
                println!("trained 0 epochs -> {}", args.out.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Attack(args) => {
            let model = checkpoint::load_model(&args.model, None)?;
            let dataset = args.data.build(args.seed)?;
            let (images, labels) =
                dataset.seeded_subset(args.samples, seed::derive(args.seed, "eval-subset"));
            let spec = args.attack.to_spec(seed::derive(args.seed, "attack"));
            let batch = pgd(&model, &images, &labels, &spec)?;
            let acc = adversarial_accuracy(&model, &batch)?;
            checkpoint::save_adv_batch(&batch, &args.out)?;
            println!(
                "generated {} adversarials (self-adversarial accuracy {:.4}) -> {}",
                batch.len(),
                acc,
                args.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Prune(args) => {
            let mut model = checkpoint::load_model(&args.model, None)?;
            let dataset = args.data.build(args.seed)?;
            let spec = PruneSpec {
                method: PruneMethod::parse(&args.method)?,
                scope: PruneScope::parse(&args.scope)?,
                compression: args.compression,
                score_sample_size: args.score_samples,
                score_batch_size: args.score_batch,
                seed: args.seed,
            };
            let attack_spec = args.attack.to_spec(seed::derive(args.seed, "gap-attack"));
            let result = prune(&mut model, &dataset, &spec, Some(&attack_spec))?;
            model.name = format!(
                "{}/{}-{}-p{}",
                model.name, args.method, args.scope, args.compression
            );
            if let Some(path) = &args.hist_out {
                export_histogram(&model, &result.masks, args.bins, None)?.write_csv(path)?;
            }
            if let Some(path) = &args.mask_out {
                checkpoint::save_masks(&result.masks, path)?;
            }
            checkpoint::save_model(&model, Some(&result), &args.out)?;
            for w in &result.warnings {
                eprintln!("warning: {w}");
            }
            for e in result.masks.entries() {
                println!(
                    "layer {}: kept {} of {}",
                    e.name,
                    e.ones_count(),
                    e.keep.len()
                );
            }
            println!(
                "pruned {} of {} prunable parameters (kept {}) -> {}",
                result.pruned_count,
                result.pruned_count + result.kept_count,
                result.kept_count,
                args.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Finetune(args) => {
            let mut model = checkpoint::load_model(&args.model, None)?;
            let dataset = args.data.build(args.seed)?;
            let cfg = gap_core::train::TrainConfig {
                epochs: args.epochs,
                base_lr: args.lr,
                lr_drop_points: Vec::new(),
                weight_decay: args.weight_decay,
                batch_size: args.batch_size,
                seed: seed::derive(args.seed, "finetune"),
                mode: TrainMode::Finetune,
            };
            let log = finetune(&mut model, &dataset, &cfg)?;
            if let Some(path) = &args.log {
                std::fs::write(path, log.to_csv())?;
            }
            checkpoint::save_model(&model, None, &args.out)?;
            println!(
                "fine-tuned {} epochs (nonzero prunable params: {}) -> {}",
                args.epochs,
                model.prunable_nonzeros(),
                args.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Quantize(args) => {
            let model = checkpoint::load_model(&args.model, None)?;
            let mut q = quantize_model(&model);
            q.twin = Some(args.model.display().to_string());
            checkpoint::save_quantized(&q, &args.out)?;
            println!("quantized {} -> {}", args.model.display(), args.out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval(args) => {
            let (model, model_name) = if args.quantized {
                let q = checkpoint::load_quantized(&args.model)?;
                let name = q.name.clone();
                (q.dequantize_model()?, name)
            } else {
                let m = checkpoint::load_model(&args.model, None)?;
                let name = m.name.clone();
                (m, name)
            };
            let dataset = args.data.build(args.seed.unwrap_or(0))?;
            let clean = clean_accuracy(&model, &dataset)?;
            println!("model={model_name} split={} clean_acc={clean:.6}", dataset.split.as_str());
            if let Some(path) = &args.adv {
                let batch = checkpoint::load_adv_batch(path)?;
                let acc = adversarial_accuracy(&model, &batch)?;
                let kind = if batch.generator == model_name { "adv_acc" } else { "transfer_acc" };
                println!("model={model_name} generator={} {kind}={acc:.6}", batch.generator);
            }
            if args.self_attack {
                let seed_v = args.seed.context("--seed is required with --self-attack")?;
                let (images, labels) =
                    dataset.seeded_subset(args.samples, seed::derive(seed_v, "eval-subset"));
                let spec = args.attack.to_spec(seed::derive(seed_v, "attack"));
                let batch = if args.quantized {
                    let q = checkpoint::load_quantized(&args.model)?;
                    surrogate_gradient_attack(&q, &model, &images, &labels, &spec)?
                } else {
                    pgd(&model, &images, &labels, &spec)?
                };
                let acc = adversarial_accuracy(&model, &batch)?;
                println!("model={model_name} adv_acc={acc:.6} samples={}", batch.len());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep(args) => {
            if let Some(path) = &args.write_default {
                let cfg = ExperimentConfig::desk_default(args.seed, args.out_dir.clone());
                std::fs::write(path, cfg.to_toml_string())?;
                println!("wrote default config -> {}", path.display());
                return Ok(ExitCode::SUCCESS);
            }
            let config = ExperimentConfig::from_toml_file(args.config.as_ref().expect("clap enforces"))?;
            let outcome = harness::run_sweep(&config)?;
            println!(
                "sweep finished in {:.1}s: {} records, {} failures, {} degenerate cells -> {}",
                outcome.elapsed.as_secs_f64(),
                outcome.records.len(),
                outcome.failures.len(),
                outcome.flags.len(),
                outcome.metrics_path.display()
            );
            for f in &outcome.failures {
                eprintln!(
                    "failed cell: trial {} {}/{} p={} at {}: {}",
                    f.trial, f.method, f.scope, f.compression, f.stage, f.error
                );
            }
            for m in &outcome.missing_cells {
                eprintln!(
                    "missing cell: {}/{} p={} quantized={} {}",
                    m.method,
                    m.scope,
                    m.compression,
                    m.quantized,
                    m.metric.as_str()
                );
            }
            if outcome.failures.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Hist(args) => {
            let model = checkpoint::load_model(&args.model, None)?;
            let masks = match model.masks() {
                Some(m) => m.clone(),
                None => gap_core::model::MaskSet::all_ones(&model),
            };
            let range = match &args.range {
                Some(text) => {
                    let parts: Vec<f32> = text
                        .split(',')
                        .map(|p| p.trim().parse().context("range must be lo,hi"))
                        .collect::<anyhow::Result<_>>()?;
                    if parts.len() != 2 {
                        bail!("--range must be lo,hi");
                    }
                    Some((parts[0], parts[1]))
                }
                None => None,
            };
            let hist = export_histogram(&model, &masks, args.bins, range)?;
            hist.write_csv(&args.out)?;
            println!(
                "histogram of {} kept weights in {} bins -> {}",
                hist.kept_total(),
                args.bins,
                args.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
