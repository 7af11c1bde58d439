//! Cross-module integration: trained models flowing through pruning,
//! fine-tuning, quantization, and attacks.

use std::sync::OnceLock;

use gap_core::attack::{adversarial_accuracy, pgd, AttackSpec};
use gap_core::data::{synthetic_blobs, BlobSpec, Dataset, Split};
use gap_core::model::{clean_accuracy, Architecture, Model};
use gap_core::prune::{prune, PruneMethod, PruneScope, PruneSpec};
use gap_core::quant::{forward_quantized, quantize_model};
use gap_core::train::{finetune, train, TrainConfig, TrainMode};
use gap_core::{model::argmax_rows, seed};

fn blob_pair(spec: &BlobSpec, test_per_class: usize) -> (Dataset, Dataset) {
    let train = synthetic_blobs(spec, Split::Train).unwrap();
    let test = synthetic_blobs(
        &BlobSpec {
            per_class: test_per_class,
            ..spec.clone()
        },
        Split::Test,
    )
    .unwrap();
    (train, test)
}

/// The reference MLP task: 10 classes x 200 samples of 28x28 blobs.
fn mlp_spec() -> BlobSpec {
    BlobSpec {
        num_classes: 10,
        per_class: 200,
        image_shape: (1, 28, 28),
        noise: 0.20,
        sigma_frac: 0.13,
        amplitude: 0.35,
        background: 0.5,
        seed: 900,
    }
}

fn train_cfg(epochs: usize, lr: f32, run_seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        base_lr: lr,
        lr_drop_points: vec![0.25, 0.5],
        weight_decay: 1e-4,
        batch_size: 64,
        seed: run_seed,
        mode: TrainMode::Train,
    }
}

struct MlpArtifacts {
    model: Model<f32>,
    train_data: Dataset,
    test_data: Dataset,
    test_acc: f64,
}

/// Shared trained MLP (several tests pin values measured on it).
fn trained_mlp() -> &'static MlpArtifacts {
    static CELL: OnceLock<MlpArtifacts> = OnceLock::new();
    CELL.get_or_init(|| {
        let (train_data, test_data) = blob_pair(&mlp_spec(), 50);
        let mut model = Model::new(Architecture::Mlp784x128x64x10, seed::derive(31, "init"));
        train(&mut model, &train_data, &train_cfg(20, 0.1, seed::derive(31, "train"))).unwrap();
        let test_acc = clean_accuracy(&model, &test_data).unwrap();
        MlpArtifacts {
            model,
            train_data,
            test_data,
            test_acc,
        }
    })
}

#[test]
fn reference_mlp_exceeds_ninety_percent_within_twenty_epochs() {
    let a = trained_mlp();
    assert!(
        a.test_acc >= 0.90,
        "reference MLP reached only {:.4}",
        a.test_acc
    );
}

#[test]
fn finetune_at_p2_recovers_base_accuracy() {
    let a = trained_mlp();
    let mut pruned = a.model.clone();
    let spec = PruneSpec::new(PruneMethod::Magnitude, PruneScope::Global, 2.0, 5);
    prune(&mut pruned, &a.train_data, &spec, None).unwrap();
    let ft = TrainConfig {
        epochs: 5,
        base_lr: 0.03,
        lr_drop_points: Vec::new(),
        weight_decay: 1e-4,
        batch_size: 64,
        seed: 44,
        mode: TrainMode::Finetune,
    };
    finetune(&mut pruned, &a.train_data, &ft).unwrap();
    let acc = clean_accuracy(&pruned, &a.test_data).unwrap();
    // >= 95% of the unpruned accuracy, with the pinned two-point tolerance
    assert!(
        acc >= 0.95 * a.test_acc - 0.02,
        "finetuned p=2 accuracy {acc:.4} vs base {:.4}",
        a.test_acc
    );
}

#[test]
fn quantized_twin_agrees_on_test_set() {
    let a = trained_mlp();
    let q = quantize_model(&a.model);
    let deq = q.dequantize_model().unwrap();
    let q_acc = clean_accuracy(&deq, &a.test_data).unwrap();
    assert!(
        (q_acc - a.test_acc).abs() <= 0.01,
        "quantized accuracy {q_acc:.4} vs full {:.4}",
        a.test_acc
    );
    // argmax agreement on the whole test split
    let full_logits = a.model.logits(a.test_data.images()).unwrap();
    let q_logits = forward_quantized(&q, a.test_data.images()).unwrap();
    let agree = argmax_rows(&full_logits)
        .iter()
        .zip(argmax_rows(&q_logits))
        .filter(|(a, b)| **a == *b)
        .count();
    let frac = agree as f64 / a.test_data.len() as f64;
    assert!(frac >= 0.98, "argmax agreement {frac:.4}");
}

#[test]
fn gap_and_gradient_masks_overlap_but_differ() {
    let a = trained_mlp();
    let attack = AttackSpec::standard(3);
    let mut gap_model = a.model.clone();
    let mut grad_model = a.model.clone();
    let mut spec = PruneSpec::new(PruneMethod::Gap, PruneScope::Global, 2.0, 9);
    spec.score_sample_size = 256;
    prune(&mut gap_model, &a.train_data, &spec, Some(&attack)).unwrap();
    let mut spec2 = PruneSpec::new(PruneMethod::Gradient, PruneScope::Global, 2.0, 9);
    spec2.score_sample_size = 256;
    prune(&mut grad_model, &a.train_data, &spec2, None).unwrap();

    let mut hamming = 0usize;
    let mut overlap_kept = 0usize;
    for (g, r) in gap_model
        .masks()
        .unwrap()
        .entries()
        .iter()
        .zip(grad_model.masks().unwrap().entries())
    {
        for (a, b) in g.keep.iter().zip(&r.keep) {
            if a != b {
                hamming += 1;
            }
            if *a == 1 && *b == 1 {
                overlap_kept += 1;
            }
        }
    }
    assert!(hamming > 0, "gap and gradient masks identical");
    assert!(overlap_kept > 0, "masks share no kept parameters");
}

#[test]
fn self_adversarial_accuracy_not_above_clean() {
    let a = trained_mlp();
    let (images, labels) = a.train_data.seeded_subset(256, 17);
    let batch = pgd(&a.model, &images, &labels, &AttackSpec::standard(23)).unwrap();
    let clean = gap_core::model::accuracy_on(&a.model, &images, &labels).unwrap();
    let adv = adversarial_accuracy(&a.model, &batch).unwrap();
    assert!(adv <= clean, "adv {adv:.4} vs clean {clean:.4}");
}
