//! SGD training and post-prune fine-tuning.
//!
//! Updates are `θ ← θ − lr·(∇L + weight_decay·θ)` per batch. When masks are
//! active the whole update is multiplied by `M`, so pruned entries stay at
//! exactly zero rather than being re-zeroed after the step.

use std::sync::Arc;

use crate::data::{BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, ForwardOpts, Model};
use crate::seed;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Train,
    Finetune,
}

/// Hyperparameters for one training or fine-tuning run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f32,
    /// Fractions of training at which the learning rate is divided by 10.
    /// Ignored in finetune mode (constant lr).
    pub lr_drop_points: Vec<f64>,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::Contract(format!("base_lr {} must be > 0", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Contract("batch_size must be >= 1".into()));
        }
        let mut prev = 0.0;
        for &p in &self.lr_drop_points {
            if p <= prev || p >= 1.0 {
                return Err(Error::Contract(format!(
                    "lr_drop_points must be strictly increasing in (0,1), got {:?}",
                    self.lr_drop_points
                )));
            }
            prev = p;
        }
        Ok(())
    }

    /// Learning rate for an epoch index. A drop at fraction `f` takes effect
    /// from epoch `ceil(f * epochs)` onward.
    pub fn lr_at_epoch(&self, epoch: usize) -> f32 {
        if self.mode == TrainMode::Finetune {
            return self.base_lr;
        }
        let drops = self
            .lr_drop_points
            .iter()
            .filter(|&&f| ((f * self.epochs as f64).ceil() as usize) <= epoch)
            .count();
        self.base_lr / 10f32.powi(drops as i32)
    }
}

/// One per-epoch log row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f32,
}

/// Per-epoch loss/accuracy log.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    /// CSV with header `epoch,split,loss,accuracy,lr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,accuracy,lr\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{}\n",
                r.epoch, r.split, r.loss, r.accuracy, r.lr
            ));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.loss)
    }
}

/// Train in `Train` mode (lr schedule active).
pub fn train(model: &mut Model<f32>, dataset: &Dataset, config: &TrainConfig) -> Result<TrainLog> {
    if config.mode != TrainMode::Train {
        return Err(Error::Contract("train() requires mode=train".into()));
    }
    run_sgd(model, dataset, config)
}

/// Fine-tune a pruned model: constant lr, masks must already be applied.
pub fn finetune(model: &mut Model<f32>, dataset: &Dataset, config: &TrainConfig) -> Result<TrainLog> {
    if config.mode != TrainMode::Finetune {
        return Err(Error::Contract("finetune() requires mode=finetune".into()));
    }
    if model.masks().is_none() {
        return Err(Error::Contract(
            "finetune requires an active mask set (apply a prune first)".into(),
        ));
    }
    run_sgd(model, dataset, config)
}

fn run_sgd(model: &mut Model<f32>, dataset: &Dataset, config: &TrainConfig) -> Result<TrainLog> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Contract("training on an empty dataset".into()));
    }
    let mut log = TrainLog::default();
    let dataset_arc = Arc::new(dataset.clone());

    for epoch in 0..config.epochs {
        let lr = config.lr_at_epoch(epoch);
        let shuffle = seed::derive_idx(config.seed, "shuffle", epoch as u64);
        let mut batches = BatchIterator::new(dataset_arc.clone(), config.batch_size, Some(shuffle))?;

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut batch_idx = 0usize;

        batches.for_each_batch(|images, labels| {
            let n = labels.len();
            let mut tape = Tape::new();
            let fp = model.forward(&mut tape, images.clone(), ForwardOpts::training())?;
            let loss = tape.cross_entropy_mean(fp.logits_id, labels)?;
            let loss_val = tape.data(loss)[0] as f64;
            if !loss_val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss diverged at epoch {epoch}, batch {batch_idx}, lr {lr}"
                )));
            }
            tape.backward(loss).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!(
                    "{m} (epoch {epoch}, batch {batch_idx}, lr {lr})"
                )),
                other => other,
            })?;

            let logits = Tensor::new(
                tape.shape(fp.logits_id).to_vec(),
                tape.data(fp.logits_id).to_vec(),
            )?;
            correct += argmax_rows(&logits)
                .iter()
                .zip(labels)
                .filter(|(p, l)| p == l)
                .count();
            loss_sum += loss_val * n as f64;
            seen += n;

            apply_update(model, &tape, &fp.param_ids, lr, config.weight_decay);
            batch_idx += 1;
            Ok(())
        })?;

        assert_masked_entries_zero(model, epoch)?;
        log.rows.push(EpochRow {
            epoch,
            split: "train".into(),
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
            lr,
        });
    }
    Ok(log)
}

/// Mask invariance: pruned entries hold exactly zero after every epoch.
fn assert_masked_entries_zero(model: &Model<f32>, epoch: usize) -> Result<()> {
    let Some(masks) = model.masks() else { return Ok(()) };
    for e in model.params().prunable() {
        let m = masks.entry(&e.name).expect("masks stay aligned");
        for (i, (w, &keep)) in e.tensor.data().iter().zip(&m.keep).enumerate() {
            if keep == 0 && *w != 0.0 {
                return Err(Error::Contract(format!(
                    "masked entry {}[{i}] drifted to {w} at epoch {epoch}",
                    e.name
                )));
            }
        }
    }
    Ok(())
}

fn apply_update(
    model: &mut Model<f32>,
    tape: &Tape<f32>,
    param_ids: &[crate::tape::TensorId],
    lr: f32,
    weight_decay: f32,
) {
    let masks = model.masks().cloned();
    for (entry, &pid) in model.params_mut().entries_mut().iter_mut().zip(param_ids) {
        let Some(grad) = tape.grad(pid) else { continue };
        let mask = masks
            .as_ref()
            .filter(|_| entry.prunable)
            .and_then(|m| m.entry(&entry.name));
        let data = entry.tensor.data_mut();
        match mask {
            Some(m) => {
                for ((w, &g), &keep) in data.iter_mut().zip(grad).zip(&m.keep) {
                    if keep == 1 {
                        *w -= lr * (g + weight_decay * *w);
                    }
                }
            }
            None => {
                for (w, &g) in data.iter_mut().zip(grad) {
                    *w -= lr * (g + weight_decay * *w);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_blobs, BlobSpec, Split};
    use crate::model::{Architecture, MaskSet};

    fn cfg(epochs: usize, lr: f32, mode: TrainMode) -> TrainConfig {
        TrainConfig {
            epochs,
            base_lr: lr,
            lr_drop_points: vec![0.25, 0.5],
            weight_decay: 0.0,
            batch_size: 8,
            seed: 1,
            mode,
        }
    }

    fn tiny_data() -> Dataset {
        synthetic_blobs(
            &BlobSpec {
                num_classes: 3,
                per_class: 8,
                image_shape: (1, 8, 8),
                noise: 0.15,
                seed: 4,
                ..BlobSpec::default()
            },
            Split::Train,
        )
        .unwrap()
    }

    fn tiny_cnn(seed: u64) -> Model<f32> {
        Model::new(
            Architecture::MiniCnn {
                in_channels: 1,
                height: 8,
                width: 8,
                num_classes: 3,
            },
            seed,
        )
    }

    #[test]
    fn lr_schedule_matches_hand_enumeration() {
        let c = TrainConfig {
            epochs: 8,
            base_lr: 0.1,
            lr_drop_points: vec![0.25, 0.5],
            weight_decay: 0.0,
            batch_size: 1,
            seed: 0,
            mode: TrainMode::Train,
        };
        let got: Vec<f32> = (0..8).map(|e| c.lr_at_epoch(e)).collect();
        let expect = [0.1, 0.1, 0.01, 0.01, 0.001, 0.001, 0.001, 0.001];
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-9, "{got:?}");
        }
    }

    #[test]
    fn finetune_mode_keeps_lr_constant() {
        let mut c = cfg(8, 0.001, TrainMode::Finetune);
        c.lr_drop_points = vec![0.25, 0.5];
        for e in 0..8 {
            assert_eq!(c.lr_at_epoch(e), 0.001);
        }
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut c = cfg(1, 0.0, TrainMode::Train);
        assert!(c.validate().is_err());
        c.base_lr = 0.1;
        c.lr_drop_points = vec![0.5, 0.25];
        assert!(c.validate().is_err());
        c.lr_drop_points = vec![0.25, 0.5];
        assert!(c.validate().is_ok());
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let data = tiny_data();
        let mut model = tiny_cnn(2);
        let before: Vec<Vec<f32>> = model.params().entries().iter().map(|e| e.tensor.data().to_vec()).collect();
        train(&mut model, &data, &cfg(0, 0.1, TrainMode::Train)).unwrap();
        let after: Vec<Vec<f32>> = model.params().entries().iter().map(|e| e.tensor.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn one_step_on_quadratic_loss_scales_by_point_nine() {
        // θ ← θ − lr·∇(½‖θ‖²) = θ(1 − lr) at lr = 0.1; exercised directly on
        // the tape because the trainer's loss is fixed to cross-entropy.
        let mut tape = Tape::new();
        let w = tape.leaf(
            Tensor::new(vec![3], vec![1.0f32, -2.0, 0.5])
                .unwrap()
                .with_requires_grad(),
        );
        let sq = tape.mul(w, w).unwrap();
        let half = tape.scale(sq, 0.5).unwrap();
        let loss = tape.sum(half).unwrap();
        tape.backward(loss).unwrap();
        let updated: Vec<f32> = tape
            .data(w)
            .iter()
            .zip(tape.grad(w).unwrap())
            .map(|(&v, &g)| v - 0.1 * g)
            .collect();
        assert_eq!(updated, vec![0.9, -1.8, 0.45]);
    }

    #[test]
    fn training_reduces_loss_and_is_seed_deterministic() {
        let data = tiny_data();
        let mut a = tiny_cnn(3);
        let log_a = train(&mut a, &data, &cfg(4, 0.05, TrainMode::Train)).unwrap();
        assert!(log_a.final_loss().unwrap() < log_a.first_loss().unwrap());

        let mut b = tiny_cnn(3);
        let log_b = train(&mut b, &data, &cfg(4, 0.05, TrainMode::Train)).unwrap();
        assert_eq!(log_a.rows, log_b.rows);
        for (ea, eb) in a.params().entries().iter().zip(b.params().entries()) {
            assert_eq!(ea.tensor.data(), eb.tensor.data());
        }
    }

    #[test]
    fn finetune_requires_masks_and_preserves_zeros() {
        let data = tiny_data();
        let mut model = tiny_cnn(5);
        let err = finetune(&mut model, &data, &cfg(1, 0.01, TrainMode::Finetune)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));

        // mask off half of conv1 weights, then finetune
        let mut entries = Vec::new();
        for e in model.params().prunable() {
            let n = e.tensor.numel();
            let keep: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
            entries.push(crate::model::MaskEntry {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                keep,
            });
        }
        let masks = MaskSet::new("magnitude", "global", 2.0, entries).unwrap();
        let kept = masks.kept_count();
        model.apply_masks_permanently(masks).unwrap();
        finetune(&mut model, &data, &cfg(2, 0.01, TrainMode::Finetune)).unwrap();
        assert_eq!(model.prunable_nonzeros(), kept);
        // every masked entry is exactly zero
        for e in model.params().prunable() {
            let m = model.masks().unwrap().entry(&e.name).unwrap();
            for (w, &keep) in e.tensor.data().iter().zip(&m.keep) {
                if keep == 0 {
                    assert_eq!(*w, 0.0);
                }
            }
        }
    }

    #[test]
    fn train_log_emits_csv_rows() {
        let data = tiny_data();
        let mut model = tiny_cnn(6);
        let log = train(&mut model, &data, &cfg(2, 0.05, TrainMode::Train)).unwrap();
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,split,loss,accuracy,lr");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,train,"));
    }
}
