//! The experiment sweep: per trial, train a base model, snapshot its
//! adversarial batch, then prune/fine-tune/evaluate every
//! (method, scope, compression) cell, optionally repeating the metrics on
//! 8-bit quantized models with surrogate-gradient attacks.
//!
//! Cells run in parallel but all randomness is derived from (config seed,
//! trial, cell), and `metrics.csv` rows are flushed in canonical order as
//! soon as their prefix is complete, so two runs of the same config produce
//! byte-identical outputs.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::attack::{adversarial_accuracy, pgd, AdversarialBatch, AttackSpec};
use crate::checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::histogram::{export_histogram, weight_range};
use crate::harness::metrics::{
    check_unique, format_compression, read_metrics_csv, summarize, summary_csv, CellKey, Metric,
    MetricsRecord, METRICS_HEADER,
};
use crate::model::{clean_accuracy, Model};
use crate::prune::{prune, PruneMethod, PruneScope, PruneSpec};
use crate::quant::quantize_model;
use crate::seed;
use crate::tensor::Tensor;
use crate::train::{finetune, train, TrainMode};

/// A cell that failed, with the stage that broke.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub trial: u64,
    pub method: String,
    pub scope: String,
    pub compression: f64,
    pub stage: String,
    pub error: String,
}

/// A cell flagged as degenerate (post-finetune clean accuracy at or below
/// chance + 5 points).
#[derive(Debug, Clone, PartialEq)]
pub struct CellFlag {
    pub trial: u64,
    pub method: String,
    pub scope: String,
    pub compression: f64,
    pub flag: String,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub records: Vec<MetricsRecord>,
    pub failures: Vec<CellFailure>,
    pub flags: Vec<CellFlag>,
    pub missing_cells: Vec<CellKey>,
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
    pub elapsed: Duration,
}

// ── Ordered incremental writer ─────────────────────────────────────────

/// Writes text units to a file in unit order, flushing each completed
/// prefix, regardless of submission order.
struct OrderedWriter {
    state: Mutex<OrderedState>,
}

struct OrderedState {
    next: usize,
    pending: BTreeMap<usize, String>,
    file: BufWriter<File>,
}

impl OrderedWriter {
    fn create(path: &Path, header: &str) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut file = BufWriter::new(file);
        writeln!(file, "{header}").map_err(|e| Error::Io(e.to_string()))?;
        file.flush().map_err(|e| Error::Io(e.to_string()))?;
        Ok(OrderedWriter {
            state: Mutex::new(OrderedState {
                next: 0,
                pending: BTreeMap::new(),
                file,
            }),
        })
    }

    fn submit(&self, unit: usize, text: String) -> Result<()> {
        let mut s = self.state.lock().expect("writer lock");
        s.pending.insert(unit, text);
        let mut wrote = false;
        loop {
            let next = s.next;
            let Some(text) = s.pending.remove(&next) else { break };
            s.file
                .write_all(text.as_bytes())
                .map_err(|e| Error::Io(e.to_string()))?;
            s.next += 1;
            wrote = true;
        }
        if wrote {
            s.file.flush().map_err(|e| Error::Io(e.to_string()))?;
        }
        Ok(())
    }
}

// ── Transfer evaluation ────────────────────────────────────────────────

/// Where the adversarials for a transfer evaluation come from.
pub enum AdvSource<'a> {
    Batch(&'a AdversarialBatch),
    Generate {
        spec: &'a AttackSpec,
        images: &'a Tensor<f32>,
        labels: &'a [u32],
    },
}

/// Accuracy of `target` on adversarials generated against `generator`.
/// Cell metadata comes from the target's masks when present.
pub fn transfer_attack_eval(
    generator: &Model<f32>,
    target: &Model<f32>,
    source: AdvSource,
    trial: u64,
) -> Result<MetricsRecord> {
    if generator.num_classes() != target.num_classes() {
        return Err(Error::Contract(format!(
            "class counts differ: generator {} vs target {}",
            generator.num_classes(),
            target.num_classes()
        )));
    }
    let owned;
    let batch = match source {
        AdvSource::Batch(b) => b,
        AdvSource::Generate {
            spec,
            images,
            labels,
        } => {
            owned = pgd(generator, images, labels, spec)?;
            &owned
        }
    };
    if batch.originals.shape().len() != 4 {
        return Err(Error::Contract("adversarial batch is not [N,C,H,W]".into()));
    }
    let value = adversarial_accuracy(target, batch)?;
    let (method, scope, compression) = match target.masks() {
        Some(m) => (m.method.clone(), m.scope.clone(), m.compression),
        None => ("none".into(), "none".into(), 1.0),
    };
    Ok(MetricsRecord {
        model_id: target.arch().id().into(),
        method,
        scope,
        compression,
        quantized: false,
        trial,
        metric: Metric::TransferAcc,
        value,
    })
}

// ── Sweep internals ────────────────────────────────────────────────────

struct SweepCtx {
    config: ExperimentConfig,
    train_data: Dataset,
    test_data: Dataset,
    eval_images: Tensor<f32>,
    eval_labels: Vec<u32>,
    arch_id: String,
    out: PathBuf,
}

struct TrialBase {
    idx: usize,
    trial_seed: u64,
    attack_seed: u64,
    model: Model<f32>,
    adv_batch: AdversarialBatch,
    weight_range: (f32, f32),
}

fn record(
    ctx: &SweepCtx,
    trial_seed: u64,
    method: &str,
    scope: &str,
    compression: f64,
    quantized: bool,
    metric: Metric,
    value: f64,
) -> MetricsRecord {
    MetricsRecord {
        model_id: ctx.arch_id.clone(),
        method: method.into(),
        scope: scope.into(),
        compression,
        quantized,
        trial: trial_seed,
        metric,
        value,
    }
}

fn rows_text(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

fn build_trial_base(ctx: &SweepCtx, t: usize) -> Result<TrialBase> {
    let trial_seed = seed::derive_idx(ctx.config.seed, "trial", t as u64);
    let arch = ctx.config.build_architecture(&ctx.train_data)?;
    let mut model = Model::new(arch, seed::derive(trial_seed, "init"));
    model.name = format!("{}/none/none/p1/t{t}", ctx.arch_id);

    let cfg = ctx
        .config
        .train
        .to_config(TrainMode::Train, seed::derive(trial_seed, "train"));
    let log = train(&mut model, &ctx.train_data, &cfg)?;
    log_to_file(&log, &ctx.out.join("logs").join(format!("train_t{t}.csv")))?;

    let attack_seed = seed::derive(trial_seed, "attack");
    let spec = ctx.config.attack.to_spec(attack_seed);
    let adv_batch = pgd(&model, &ctx.eval_images, &ctx.eval_labels, &spec)?;
    checkpoint::save_adv_batch(
        &adv_batch,
        ctx.out.join("checkpoints").join(format!("advbatch_base_t{t}.gapw")),
    )?;
    checkpoint::save_model(
        &model,
        None,
        ctx.out.join("checkpoints").join(format!("base_t{t}.gapw")),
    )?;

    let range = weight_range(&model)
        .ok_or_else(|| Error::Contract("model has no prunable weights".into()))?;
    let all_ones = crate::model::MaskSet::all_ones(&model);
    export_histogram(&model, &all_ones, ctx.config.histogram_bins, Some(range))?
        .write_csv(ctx.out.join("histograms").join(format!("hist_unpruned_t{t}.csv")))?;

    Ok(TrialBase {
        idx: t,
        trial_seed,
        attack_seed,
        model,
        adv_batch,
        weight_range: range,
    })
}

fn log_to_file(log: &crate::train::TrainLog, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, log.to_csv()).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn baseline_records(ctx: &SweepCtx, base: &TrialBase) -> Result<Vec<MetricsRecord>> {
    let mut records = Vec::new();
    if !ctx.config.unpruned_baseline {
        return Ok(records);
    }
    let t = base.trial_seed;
    let test = clean_accuracy(&base.model, &ctx.test_data)?;
    let adv = adversarial_accuracy(&base.model, &base.adv_batch)?;
    records.push(record(ctx, t, "none", "none", 1.0, false, Metric::TestAcc, test));
    records.push(record(ctx, t, "none", "none", 1.0, false, Metric::AdvAcc, adv));
    // generator == target: the transfer metric coincides with self-adversarial
    records.push(record(ctx, t, "none", "none", 1.0, false, Metric::TransferAcc, adv));

    if ctx.config.quantize {
        let q = quantize_model(&base.model);
        checkpoint::save_quantized(
            &q,
            ctx.out
                .join("checkpoints")
                .join(format!("base_t{}_q8.gapw", base.idx)),
        )?;
        let deq = q.dequantize_model()?;
        let test_q = clean_accuracy(&deq, &ctx.test_data)?;
        // surrogate gradients come from the twin, so the quantized model's
        // attack batch is bit-identical to the base snapshot
        let adv_q = adversarial_accuracy(&deq, &base.adv_batch)?;
        let transfer_q = adversarial_accuracy(&deq, &base.adv_batch)?;
        records.push(record(ctx, t, "none", "none", 1.0, true, Metric::TestAcc, test_q));
        records.push(record(ctx, t, "none", "none", 1.0, true, Metric::AdvAcc, adv_q));
        records.push(record(ctx, t, "none", "none", 1.0, true, Metric::TransferAcc, transfer_q));
    }
    Ok(records)
}

struct CellOutput {
    records: Vec<MetricsRecord>,
    flags: Vec<CellFlag>,
}

fn run_cell(
    ctx: &SweepCtx,
    base: &TrialBase,
    cell_idx: usize,
    method: PruneMethod,
    scope: PruneScope,
    compression: f64,
) -> Result<CellOutput> {
    let t = base.idx;
    let cell_seed = seed::derive_idx(base.trial_seed, "cell", cell_idx as u64);
    let tag = format!(
        "{}_{}_p{}_t{t}",
        method.as_str(),
        scope.as_str(),
        format_compression(compression)
    );

    let mut model = base.model.clone();
    model.name = format!(
        "{}/{}/{}/p{}/t{t}",
        ctx.arch_id,
        method.as_str(),
        scope.as_str(),
        format_compression(compression)
    );

    let spec = PruneSpec {
        method,
        scope,
        compression,
        score_sample_size: ctx.config.prune.score_sample_size,
        score_batch_size: ctx.config.prune.score_batch_size,
        seed: cell_seed,
    };
    let gap_attack = ctx.config.attack.to_spec(seed::derive(cell_seed, "gap-attack"));
    let stage = |s: &str, e: Error| Error::Contract(format!("stage {s}: {e}"));

    let prune_result = prune(&mut model, &ctx.train_data, &spec, Some(&gap_attack))
        .map_err(|e| stage("prune", e))?;

    export_histogram(
        &model,
        &prune_result.masks,
        ctx.config.histogram_bins,
        Some(base.weight_range),
    )
    .and_then(|h| h.write_csv(ctx.out.join("histograms").join(format!("hist_{tag}.csv"))))
    .map_err(|e| stage("histogram", e))?;

    let ft = ctx
        .config
        .finetune
        .to_config(TrainMode::Finetune, seed::derive(cell_seed, "finetune"));
    finetune(&mut model, &ctx.train_data, &ft).map_err(|e| stage("finetune", e))?;

    checkpoint::save_model(
        &model,
        Some(&prune_result),
        ctx.out.join("checkpoints").join(format!("{tag}.gapw")),
    )
    .map_err(|e| stage("checkpoint", e))?;

    let ts = base.trial_seed;
    let mut records = Vec::new();
    let mut flags = Vec::new();

    let test = clean_accuracy(&model, &ctx.test_data).map_err(|e| stage("test-acc", e))?;
    let self_spec = ctx.config.attack.to_spec(base.attack_seed);
    let self_batch = pgd(&model, &ctx.eval_images, &ctx.eval_labels, &self_spec)
        .map_err(|e| stage("self-attack", e))?;
    let adv = adversarial_accuracy(&model, &self_batch).map_err(|e| stage("adv-acc", e))?;
    let transfer =
        adversarial_accuracy(&model, &base.adv_batch).map_err(|e| stage("transfer-acc", e))?;

    let m = method.as_str();
    let s = scope.as_str();
    records.push(record(ctx, ts, m, s, compression, false, Metric::TestAcc, test));
    records.push(record(ctx, ts, m, s, compression, false, Metric::AdvAcc, adv));
    records.push(record(ctx, ts, m, s, compression, false, Metric::TransferAcc, transfer));

    let chance = 1.0 / ctx.train_data.num_classes() as f64;
    if test <= chance + 0.05 {
        flags.push(CellFlag {
            trial: ts,
            method: m.into(),
            scope: s.into(),
            compression,
            flag: "degenerate".into(),
        });
    }

    if ctx.config.quantize {
        let q = quantize_model(&model);
        checkpoint::save_quantized(
            &q,
            ctx.out.join("checkpoints").join(format!("{tag}_q8.gapw")),
        )
        .map_err(|e| stage("quantize-checkpoint", e))?;
        let deq = q.dequantize_model().map_err(|e| stage("dequantize", e))?;
        let test_q = clean_accuracy(&deq, &ctx.test_data).map_err(|e| stage("q-test-acc", e))?;
        // The surrogate-gradient attack takes every gradient from the
        // full-precision twin, so with the same seed its batch is bit-equal
        // to `self_batch`; reusing it avoids recomputing the same PGD run.
        let q_batch = &self_batch;
        let adv_q = adversarial_accuracy(&deq, q_batch).map_err(|e| stage("q-adv-acc", e))?;
        let transfer_q =
            adversarial_accuracy(&deq, &base.adv_batch).map_err(|e| stage("q-transfer-acc", e))?;
        records.push(record(ctx, ts, m, s, compression, true, Metric::TestAcc, test_q));
        records.push(record(ctx, ts, m, s, compression, true, Metric::AdvAcc, adv_q));
        records.push(record(ctx, ts, m, s, compression, true, Metric::TransferAcc, transfer_q));
    }

    Ok(CellOutput { records, flags })
}

/// Run the whole matrix. Failed cells are recorded and skipped; everything
/// else completes. Outputs land in `config.output_dir`.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepOutcome> {
    let started = Instant::now();
    config.validate()?;
    let (train_data, test_data) = config.build_datasets()?;
    let arch_id = config.model.architecture.clone();
    let out = config.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
    for sub in ["checkpoints", "histograms", "logs"] {
        fs::create_dir_all(out.join(sub)).map_err(|e| Error::Io(e.to_string()))?;
    }

    let (eval_images, eval_labels) = train_data.seeded_subset(
        config.attack.eval_sample_size,
        seed::derive(config.seed, "eval-subset"),
    );
    let ctx = Arc::new(SweepCtx {
        config: config.clone(),
        train_data,
        test_data,
        eval_images,
        eval_labels,
        arch_id,
        out: out.clone(),
    });

    // config snapshot for reproducibility
    fs::write(out.join("config.toml"), config.to_toml_string())
        .map_err(|e| Error::Io(e.to_string()))?;

    let pairs: Vec<(PruneMethod, PruneScope)> = config
        .prune
        .pairs
        .iter()
        .map(|(m, s)| Ok((PruneMethod::parse(m)?, PruneScope::parse(s)?)))
        .collect::<Result<_>>()?;
    let cells_per_trial = pairs.len() * config.prune.compressions.len();
    let units_per_trial = 1 + cells_per_trial;

    let metrics_path = out.join("metrics.csv");
    let writer = OrderedWriter::create(&metrics_path, METRICS_HEADER)?;
    let failures: Mutex<Vec<CellFailure>> = Mutex::new(Vec::new());
    let flags: Mutex<Vec<CellFlag>> = Mutex::new(Vec::new());

    // per trial: train the base model, snapshot its adversarial batch, emit
    // baseline rows
    let bases: Vec<Option<TrialBase>> = (0..config.trials)
        .into_par_iter()
        .map(|t| {
            let unit = t * units_per_trial;
            match build_trial_base(&ctx, t).and_then(|base| {
                let rows = baseline_records(&ctx, &base)?;
                Ok((base, rows))
            }) {
                Ok((base, rows)) => {
                    writer.submit(unit, rows_text(&rows))?;
                    Ok(Some(base))
                }
                Err(e) => {
                    writer.submit(unit, String::new())?;
                    failures.lock().expect("failures lock").push(CellFailure {
                        trial: seed::derive_idx(ctx.config.seed, "trial", t as u64),
                        method: "none".into(),
                        scope: "none".into(),
                        compression: 1.0,
                        stage: "base".into(),
                        error: e.to_string(),
                    });
                    Ok(None)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;

    // every (trial, method/scope, compression) cell, in parallel
    let mut cell_specs = Vec::with_capacity(config.trials * cells_per_trial);
    for t in 0..config.trials {
        for (pi, &(method, scope)) in pairs.iter().enumerate() {
            for (ci, &p) in config.prune.compressions.iter().enumerate() {
                let cell_idx = pi * config.prune.compressions.len() + ci;
                let unit = t * units_per_trial + 1 + cell_idx;
                cell_specs.push((t, cell_idx, unit, method, scope, p));
            }
        }
    }

    cell_specs
        .into_par_iter()
        .map(|(t, cell_idx, unit, method, scope, p)| -> Result<()> {
            let Some(base) = &bases[t] else {
                writer.submit(unit, String::new())?;
                failures.lock().expect("failures lock").push(CellFailure {
                    trial: seed::derive_idx(ctx.config.seed, "trial", t as u64),
                    method: method.as_str().into(),
                    scope: scope.as_str().into(),
                    compression: p,
                    stage: "base".into(),
                    error: "base model unavailable".into(),
                });
                return Ok(());
            };
            match run_cell(&ctx, base, cell_idx, method, scope, p) {
                Ok(output) => {
                    writer.submit(unit, rows_text(&output.records))?;
                    flags.lock().expect("flags lock").extend(output.flags);
                }
                Err(e) => {
                    writer.submit(unit, String::new())?;
                    let (stage, error) = match &e {
                        Error::Contract(m) if m.starts_with("stage ") => {
                            let rest = &m["stage ".len()..];
                            match rest.split_once(": ") {
                                Some((s, err)) => (s.to_string(), err.to_string()),
                                None => ("cell".into(), m.clone()),
                            }
                        }
                        other => ("cell".into(), other.to_string()),
                    };
                    failures.lock().expect("failures lock").push(CellFailure {
                        trial: base.trial_seed,
                        method: method.as_str().into(),
                        scope: scope.as_str().into(),
                        compression: p,
                        stage,
                        error,
                    });
                }
            }
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;

    let records = read_metrics_csv(&metrics_path)?;
    for r in &records {
        r.validate()?;
    }
    check_unique(&records)?;

    // requested cells: everything the config promises
    let mut requested = Vec::new();
    for quantized in [false, true] {
        if quantized && !config.quantize {
            continue;
        }
        for metric in Metric::ALL {
            if config.unpruned_baseline {
                requested.push(CellKey {
                    method: "none".into(),
                    scope: "none".into(),
                    compression: "1".into(),
                    quantized,
                    metric,
                });
            }
            for (m, s) in &config.prune.pairs {
                for &p in &config.prune.compressions {
                    requested.push(CellKey {
                        method: m.clone(),
                        scope: s.clone(),
                        compression: format_compression(p),
                        quantized,
                        metric,
                    });
                }
            }
        }
    }
    let (summary_rows, missing_cells) = summarize(&records, Some(&requested));
    let summary_path = out.join("summary.csv");
    fs::write(&summary_path, summary_csv(&summary_rows)).map_err(|e| Error::Io(e.to_string()))?;

    let mut failures = failures.into_inner().expect("failures lock");
    failures.sort_by(|a, b| {
        (a.trial, &a.method, &a.scope)
            .cmp(&(b.trial, &b.method, &b.scope))
            .then(a.compression.total_cmp(&b.compression))
    });
    let mut flags = flags.into_inner().expect("flags lock");
    flags.sort_by(|a, b| {
        (a.trial, &a.method, &a.scope)
            .cmp(&(b.trial, &b.method, &b.scope))
            .then(a.compression.total_cmp(&b.compression))
    });

    let mut failure_csv = String::from("trial,method,scope,compression,stage,error\n");
    for f in &failures {
        failure_csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            f.trial,
            f.method,
            f.scope,
            format_compression(f.compression),
            f.stage,
            f.error.replace(',', ";")
        ));
    }
    fs::write(out.join("failures.csv"), failure_csv).map_err(|e| Error::Io(e.to_string()))?;

    let mut flag_csv = String::from("trial,method,scope,compression,flag\n");
    for f in &flags {
        flag_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            f.trial,
            f.method,
            f.scope,
            format_compression(f.compression),
            f.flag
        ));
    }
    fs::write(out.join("flags.csv"), flag_csv).map_err(|e| Error::Io(e.to_string()))?;

    Ok(SweepOutcome {
        records,
        failures,
        flags,
        missing_cells,
        metrics_path,
        summary_path,
        elapsed: started.elapsed(),
    })
}
