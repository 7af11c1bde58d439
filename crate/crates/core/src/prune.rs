//! Parameter scoring and mask generation.
//!
//! Four scoring rules over the prunable parameters:
//!
//! * `magnitude`: `s(θ) = |θ|` — smallest magnitudes pruned.
//! * `gradient`: `s(θ) = Σ_D' |∇_θ L|` — smallest accumulated gradients pruned.
//! * `gap`: `s(θ) = Σ_D' -∇_θ L(θ, x_adv, y)` over PGD adversarials generated
//!   on the model being pruned. No absolute value: negating the sum makes the
//!   lowest scores the parameters with the *largest positive* adversarial
//!   gradients, so those are removed.
//! * `random`: i.i.d. uniform scores.
//!
//! Masks prune the `round(N·(1-1/p))` lowest-scored entries per scope (per
//! layer or pooled across layers), ties broken by ascending flat index. The
//! reported threshold γ is the smallest kept score.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack::{pgd, AttackSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ForwardOpts, MaskEntry, MaskSet, Model};
use crate::seed;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneMethod {
    Random,
    Magnitude,
    Gradient,
    Gap,
}

impl PruneMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PruneMethod::Random => "random",
            PruneMethod::Magnitude => "magnitude",
            PruneMethod::Gradient => "gradient",
            PruneMethod::Gap => "gap",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(PruneMethod::Random),
            "magnitude" => Ok(PruneMethod::Magnitude),
            "gradient" => Ok(PruneMethod::Gradient),
            "gap" => Ok(PruneMethod::Gap),
            other => Err(Error::Contract(format!("unknown prune method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneScope {
    Layerwise,
    Global,
}

impl PruneScope {
    pub fn as_str(self) -> &'static str {
        match self {
            PruneScope::Layerwise => "layerwise",
            PruneScope::Global => "global",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "layerwise" => Ok(PruneScope::Layerwise),
            "global" => Ok(PruneScope::Global),
            other => Err(Error::Contract(format!("unknown prune scope {other:?}"))),
        }
    }
}

/// What to prune and how hard.
#[derive(Debug, Clone)]
pub struct PruneSpec {
    pub method: PruneMethod,
    pub scope: PruneScope,
    /// Compression ratio p >= 1: original params per kept param.
    pub compression: f64,
    /// Training points scored for gradient/gap methods.
    pub score_sample_size: usize,
    /// Batch granularity of score accumulation.
    pub score_batch_size: usize,
    pub seed: u64,
}

impl PruneSpec {
    pub fn new(method: PruneMethod, scope: PruneScope, compression: f64, seed: u64) -> Self {
        PruneSpec {
            method,
            scope,
            compression,
            score_sample_size: 2048,
            score_batch_size: 256,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.compression >= 1.0) {
            return Err(Error::Contract(format!(
                "compression {} must be >= 1",
                self.compression
            )));
        }
        if self.score_batch_size == 0 {
            return Err(Error::Contract("score_batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-parameter importance scores, aligned with the prunable parameters.
#[derive(Debug, Clone)]
pub struct ScoreVector {
    pub method: PruneMethod,
    entries: Vec<ScoreEntry>,
}

#[derive(Debug, Clone)]
pub struct ScoreEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub scores: Vec<f64>,
}

impl ScoreVector {
    pub fn new(method: PruneMethod, entries: Vec<ScoreEntry>) -> Result<Self> {
        for e in &entries {
            let numel: usize = e.shape.iter().product();
            if numel != e.scores.len() {
                return Err(Error::Dimension(format!(
                    "scores for {} have {} values, shape {:?} implies {numel}",
                    e.name,
                    e.scores.len(),
                    e.shape
                )));
            }
            if let Some(v) = e.scores.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("score {v} in {}", e.name)));
            }
        }
        Ok(ScoreVector { method, entries })
    }

    pub fn entries(&self) -> &[ScoreEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.scores.len()).sum()
    }
}

/// Threshold for one scope: `layer: None` means global.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGamma {
    pub layer: Option<String>,
    /// Smallest kept score; +inf when the scope kept nothing.
    pub value: f64,
}

/// Masks plus the thresholds and counts that produced them.
#[derive(Debug, Clone)]
pub struct PruneResult {
    pub masks: MaskSet,
    pub gamma: Vec<LayerGamma>,
    pub pruned_count: usize,
    pub kept_count: usize,
    pub warnings: Vec<String>,
}

// ── Scoring ────────────────────────────────────────────────────────────

/// `s(θ) = |θ|`.
pub fn score_magnitude(model: &Model<f32>) -> ScoreVector {
    let entries = model
        .params()
        .prunable()
        .map(|e| ScoreEntry {
            name: e.name.clone(),
            shape: e.tensor.shape().to_vec(),
            scores: e.tensor.data().iter().map(|&w| f64::from(w.abs())).collect(),
        })
        .collect();
    ScoreVector::new(PruneMethod::Magnitude, entries).expect("finite |θ|")
}

/// i.i.d. uniform(0,1) scores, seeded.
pub fn score_random(model: &Model<f32>, seed: u64) -> ScoreVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = model
        .params()
        .prunable()
        .map(|e| ScoreEntry {
            name: e.name.clone(),
            shape: e.tensor.shape().to_vec(),
            scores: (0..e.tensor.numel()).map(|_| rng.gen::<f64>()).collect(),
        })
        .collect();
    ScoreVector::new(PruneMethod::Random, entries).expect("finite uniforms")
}

/// `s(θ) = Σ |∇_θ L|` over a seeded sample, accumulated as the absolute
/// gradient of each batch's summed loss.
pub fn score_gradient(
    model: &Model<f32>,
    dataset: &Dataset,
    sample_size: usize,
    batch_size: usize,
    score_seed: u64,
) -> Result<ScoreVector> {
    let (images, labels) = score_sample(dataset, sample_size, score_seed)?;
    let sums = accumulate_batch_gradients(model, &images, &labels, batch_size, true)?;
    finish_scores(model, PruneMethod::Gradient, sums)
}

/// `s(θ) = Σ -∇_θ L(θ, x_adv, y)`: adversarials are generated once on the
/// model being pruned, signed gradients accumulate without absolute value.
pub fn score_gap(
    model: &Model<f32>,
    dataset: &Dataset,
    attack_spec: &AttackSpec,
    sample_size: usize,
    batch_size: usize,
    score_seed: u64,
) -> Result<ScoreVector> {
    let (images, labels) = score_sample(dataset, sample_size, score_seed)?;
    let adv = pgd(model, &images, &labels, attack_spec)?;
    let grads = accumulate_batch_gradients(model, &adv.adversarials, &labels, batch_size, false)?;
    let negated: Vec<Vec<f64>> = grads.into_iter().map(|g| g.into_iter().map(|v| -v).collect()).collect();
    finish_scores(model, PruneMethod::Gap, negated)
}

fn score_sample(dataset: &Dataset, sample_size: usize, score_seed: u64) -> Result<(Tensor<f32>, Vec<u32>)> {
    if sample_size == 0 || dataset.is_empty() {
        return Err(Error::Contract("scoring requires a non-empty sample".into()));
    }
    Ok(dataset.seeded_subset(sample_size, seed::derive(score_seed, "score-sample")))
}

/// Per prunable parameter, the accumulated (|·| if `absolute`) gradient of
/// the per-batch summed loss.
fn accumulate_batch_gradients(
    model: &Model<f32>,
    images: &Tensor<f32>,
    labels: &[u32],
    batch_size: usize,
    absolute: bool,
) -> Result<Vec<Vec<f64>>> {
    let prunable_idx: Vec<usize> = model
        .params()
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.prunable)
        .map(|(i, _)| i)
        .collect();
    let mut sums: Vec<Vec<f64>> = model
        .params()
        .prunable()
        .map(|e| vec![0.0; e.tensor.numel()])
        .collect();

    let n = images.shape()[0];
    let (c, h, w) = (images.shape()[1], images.shape()[2], images.shape()[3]);
    let stride = c * h * w;
    for start in (0..n).step_by(batch_size) {
        let end = (start + batch_size).min(n);
        let x = Tensor::new(
            vec![end - start, c, h, w],
            images.data()[start * stride..end * stride].to_vec(),
        )?;
        let mut tape = Tape::new();
        let fp = model.forward(&mut tape, x, ForwardOpts::training())?;
        let mean = tape.cross_entropy_mean(fp.logits_id, &labels[start..end])?;
        let summed = tape.scale(mean, (end - start) as f32)?;
        tape.backward(summed)?;
        for (slot, &pi) in sums.iter_mut().zip(&prunable_idx) {
            let g = tape
                .grad(fp.param_ids[pi])
                .ok_or_else(|| Error::Contract("missing parameter gradient".into()))?;
            if absolute {
                for (s, &gv) in slot.iter_mut().zip(g) {
                    *s += f64::from(gv).abs();
                }
            } else {
                for (s, &gv) in slot.iter_mut().zip(g) {
                    *s += f64::from(gv);
                }
            }
        }
    }
    Ok(sums)
}

fn finish_scores(model: &Model<f32>, method: PruneMethod, sums: Vec<Vec<f64>>) -> Result<ScoreVector> {
    let entries = model
        .params()
        .prunable()
        .zip(sums)
        .map(|(e, scores)| ScoreEntry {
            name: e.name.clone(),
            shape: e.tensor.shape().to_vec(),
            scores,
        })
        .collect();
    ScoreVector::new(method, entries)
}

// ── Mask generation ────────────────────────────────────────────────────

/// Pruned count for a scope of `n` entries at compression `p`.
fn target_pruned(n: usize, p: f64) -> usize {
    if p.is_infinite() {
        return n;
    }
    ((n as f64) * (1.0 - 1.0 / p)).round().min(n as f64) as usize
}

/// Build masks from scores: the `round(N(1-1/p))` lowest-scored entries per
/// scope get `M = 0`, ties broken by ascending flat parameter index.
pub fn generate_mask(scores: &ScoreVector, spec: &PruneSpec) -> Result<PruneResult> {
    spec.validate()?;
    let mut warnings = Vec::new();
    let mut gamma = Vec::new();
    let mut keeps: Vec<Vec<u8>> = scores
        .entries()
        .iter()
        .map(|e| vec![1u8; e.scores.len()])
        .collect();
    let mut pruned_total = 0usize;

    match spec.scope {
        PruneScope::Layerwise => {
            for (ei, e) in scores.entries().iter().enumerate() {
                let k = target_pruned(e.scores.len(), spec.compression);
                if k == e.scores.len() && k > 0 {
                    warnings.push(format!("layer {} fully pruned at p={}", e.name, spec.compression));
                }
                let g = prune_lowest(&e.scores, k, &mut keeps[ei]);
                gamma.push(LayerGamma {
                    layer: Some(e.name.clone()),
                    value: g,
                });
                pruned_total += k;
            }
        }
        PruneScope::Global => {
            let total: usize = scores.total_len();
            let k = target_pruned(total, spec.compression);
            if k == total && k > 0 {
                warnings.push(format!(
                    "all prunable parameters pruned at p={}",
                    spec.compression
                ));
            }
            // pool scores with (entry, flat) addresses; the pooled position
            // doubles as the global tie-break index
            let mut pooled: Vec<(f64, usize, usize)> = Vec::with_capacity(total);
            for (ei, e) in scores.entries().iter().enumerate() {
                for (fi, &s) in e.scores.iter().enumerate() {
                    pooled.push((s, ei, fi));
                }
            }
            pooled.sort_by(|a, b| {
                a.0.partial_cmp(&b.0)
                    .expect("finite scores")
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            for &(_, ei, fi) in pooled.iter().take(k) {
                keeps[ei][fi] = 0;
            }
            let g = if k < total { pooled[k].0 } else { f64::INFINITY };
            gamma.push(LayerGamma {
                layer: None,
                value: g,
            });
            pruned_total = k;
        }
    }

    let entries: Vec<MaskEntry> = scores
        .entries()
        .iter()
        .zip(keeps)
        .map(|(e, keep)| MaskEntry {
            name: e.name.clone(),
            shape: e.shape.clone(),
            keep,
        })
        .collect();
    let masks = MaskSet::new(
        scores.method.as_str(),
        spec.scope.as_str(),
        spec.compression,
        entries,
    )?;
    let kept_count = scores.total_len() - pruned_total;
    debug_assert_eq!(masks.kept_count(), kept_count);
    Ok(PruneResult {
        masks,
        gamma,
        pruned_count: pruned_total,
        kept_count,
        warnings,
    })
}

/// Zero the `k` lowest entries of `scores` in `keep` (ties broken by
/// ascending flat index); returns the smallest kept score.
fn prune_lowest(scores: &[f64], k: usize, keep: &mut [u8]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    for &flat in order.iter().take(k) {
        keep[flat] = 0;
    }
    if k < scores.len() {
        scores[order[k]]
    } else {
        f64::INFINITY
    }
}

/// Single-shot prune: score with the configured method, build the mask, and
/// apply it permanently (`θ ← M ⊙ θ`, masks retained).
pub fn prune(
    model: &mut Model<f32>,
    dataset: &Dataset,
    spec: &PruneSpec,
    attack_spec: Option<&AttackSpec>,
) -> Result<PruneResult> {
    spec.validate()?;
    let scores = match spec.method {
        PruneMethod::Magnitude => score_magnitude(model),
        PruneMethod::Random => score_random(model, seed::derive(spec.seed, "random-score")),
        PruneMethod::Gradient => score_gradient(
            model,
            dataset,
            spec.score_sample_size,
            spec.score_batch_size,
            spec.seed,
        )?,
        PruneMethod::Gap => {
            let attack = attack_spec.ok_or_else(|| {
                Error::Contract("gap pruning requires an attack spec".into())
            })?;
            score_gap(
                model,
                dataset,
                attack,
                spec.score_sample_size,
                spec.score_batch_size,
                spec.seed,
            )?
        }
    };
    let result = generate_mask(&scores, spec)?;
    model.apply_masks_permanently(result.masks.clone())?;
    Ok(result)
}
