//! Property tests for the crate's core invariants.

use proptest::prelude::*;

use gap_core::attack::{pgd, AttackSpec};
use gap_core::data::{synthetic_blobs, BlobSpec, Split};
use gap_core::model::{Architecture, Model};
use gap_core::prune::{generate_mask, PruneMethod, PruneScope, PruneSpec, ScoreEntry, ScoreVector};
use gap_core::quant::QuantizedTensor;
use gap_core::tensor::Tensor;

fn score_vec(scores: Vec<f64>) -> ScoreVector {
    let n = scores.len();
    ScoreVector::new(
        PruneMethod::Magnitude,
        vec![ScoreEntry {
            name: "w".into(),
            shape: vec![n],
            scores,
        }],
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Pruned count always equals round(N(1-1/p)) and the score boundary is
    /// respected: no pruned score exceeds any kept score.
    #[test]
    fn mask_counts_and_boundary(
        scores in prop::collection::vec(-1e3..1e3f64, 1..48),
        p in 1.0..64.0f64,
    ) {
        let n = scores.len();
        let sv = score_vec(scores.clone());
        let spec = PruneSpec::new(PruneMethod::Magnitude, PruneScope::Global, p, 0);
        let result = generate_mask(&sv, &spec).unwrap();
        let expect = ((n as f64) * (1.0 - 1.0 / p)).round().min(n as f64) as usize;
        prop_assert_eq!(result.pruned_count, expect);
        prop_assert_eq!(result.kept_count + result.pruned_count, n);

        let keep = &result.masks.entries()[0].keep;
        let max_pruned = keep.iter().zip(&scores).filter(|(k, _)| **k == 0).map(|(_, s)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        let min_kept = keep.iter().zip(&scores).filter(|(k, _)| **k == 1).map(|(_, s)| *s)
            .fold(f64::INFINITY, f64::min);
        prop_assert!(max_pruned <= min_kept || expect == n || expect == 0);
    }

    /// One epoch of batches is a permutation of the index set.
    #[test]
    fn epoch_order_is_a_permutation(
        classes in 1..4usize,
        per_class in 1..9usize,
        batch in 1..17usize,
        shuffle_seed in any::<u64>(),
    ) {
        let data = synthetic_blobs(
            &BlobSpec {
                num_classes: classes,
                per_class,
                image_shape: (1, 4, 4),
                noise: 0.1,
                seed: 3,
                ..BlobSpec::default()
            },
            Split::Train,
        )
        .unwrap();
        let n = data.len();
        let it = gap_core::data::BatchIterator::new(std::sync::Arc::new(data), batch, Some(shuffle_seed)).unwrap();
        let mut order = it.epoch_order();
        order.sort_unstable();
        let expect: Vec<usize> = (0..n).collect();
        prop_assert_eq!(order, expect);
    }

    /// Quantization round trip stays within half a step (+1e-7) of every
    /// in-range weight.
    #[test]
    fn quant_round_trip_bounded(values in prop::collection::vec(-10.0..10.0f32, 1..256)) {
        let n = values.len();
        let t = Tensor::new(vec![n], values.clone()).unwrap();
        let q = QuantizedTensor::quantize(&t);
        let bound = q.params.scale / 2.0 + 1e-7;
        for (&w, &c) in values.iter().zip(&q.codes) {
            let back = q.params.dequantize_one(c);
            prop_assert!(
                (f64::from(back) - f64::from(w)).abs() <= bound,
                "w={w} back={back} scale={}",
                q.params.scale
            );
        }
    }

    /// PGD outputs always satisfy the ball and clip-range invariants and are
    /// bitwise deterministic in the seed.
    #[test]
    fn pgd_contained_and_deterministic(
        eps_steps in 0..40u32,
        alpha_frac in 0.05..1.0f32,
        steps in 1..4usize,
        seed in any::<u64>(),
    ) {
        let epsilon = eps_steps as f32 / 255.0;
        let spec = AttackSpec {
            epsilon,
            alpha: if epsilon > 0.0 { (epsilon * alpha_frac).max(1e-4) } else { 0.01 },
            steps,
            random_start: true,
            clip_min: 0.0,
            clip_max: 1.0,
            seed,
        };
        let model: Model<f32> = Model::new(
            Architecture::MiniCnn { in_channels: 1, height: 4, width: 4, num_classes: 3 },
            9,
        );
        let data = synthetic_blobs(
            &BlobSpec {
                num_classes: 3,
                per_class: 2,
                image_shape: (1, 4, 4),
                noise: 0.2,
                seed: 5,
                ..BlobSpec::default()
            },
            Split::Train,
        )
        .unwrap();
        let (images, labels) = data.seeded_subset(6, 1);
        let a = pgd(&model, &images, &labels, &spec).unwrap();
        a.check_invariants().unwrap();
        let b = pgd(&model, &images, &labels, &spec).unwrap();
        prop_assert_eq!(a.adversarials.data(), b.adversarials.data());
        if epsilon == 0.0 {
            prop_assert_eq!(a.adversarials.data(), images.data());
        }
    }
}
