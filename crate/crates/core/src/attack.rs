//! PGD adversarial input generation and adversarial/transfer accuracy.
//!
//! The attack iterates `x ← Π_{x0±ε}(x + α·sgn(∇_x L))` with an optional
//! uniform random start, clipping to the valid pixel range after each
//! projection. `sgn(0) = 0`, so zero-gradient pixels never move.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{accuracy_on, ForwardOpts, Model};
use crate::quant::QuantizedModel;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Samples attacked per tape; per-sample results are independent of this.
const ATTACK_CHUNK: usize = 256;

/// PGD configuration in pixel units.
#[derive(Debug, Clone)]
pub struct AttackSpec {
    /// L-infinity radius.
    pub epsilon: f32,
    /// Step size.
    pub alpha: f32,
    /// Iteration count `t`.
    pub steps: usize,
    pub random_start: bool,
    pub clip_min: f32,
    pub clip_max: f32,
    pub seed: u64,
}

impl AttackSpec {
    /// ε = 8/255, α = 2/255, t = 10, random start, pixels in [0,1].
    pub fn standard(seed: u64) -> Self {
        AttackSpec {
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 10,
            random_start: true,
            clip_min: 0.0,
            clip_max: 1.0,
            seed,
        }
    }

    /// ε = 0 degenerates the ball to a point and is allowed (adversarials
    /// then equal the originals); otherwise alpha must lie in (0, ε].
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::Contract(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Contract(format!("alpha {} must be > 0", self.alpha)));
        }
        if self.epsilon > 0.0 && self.alpha > self.epsilon {
            return Err(Error::Contract(format!(
                "alpha {} exceeds epsilon {}",
                self.alpha, self.epsilon
            )));
        }
        if self.steps < 1 {
            return Err(Error::Contract("steps must be >= 1".into()));
        }
        if self.clip_min >= self.clip_max {
            return Err(Error::Contract(format!(
                "clip range [{}, {}] is empty",
                self.clip_min, self.clip_max
            )));
        }
        Ok(())
    }
}

/// Originals with their adversarial counterparts, labels, and the identity
/// of the model whose gradients generated them.
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    pub originals: Tensor<f32>,
    pub adversarials: Tensor<f32>,
    pub labels: Vec<u32>,
    pub generator: String,
    pub epsilon: f32,
    pub clip_min: f32,
    pub clip_max: f32,
}

impl AdversarialBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Every adversarial stays within ε (+1e-6 rounding headroom) of its
    /// original and within the clip range.
    pub fn check_invariants(&self) -> Result<()> {
        if self.originals.shape() != self.adversarials.shape() {
            return Err(Error::Dimension(format!(
                "originals {:?} vs adversarials {:?}",
                self.originals.shape(),
                self.adversarials.shape()
            )));
        }
        let bound = self.epsilon + 1e-6;
        for (i, (&o, &a)) in self
            .originals
            .data()
            .iter()
            .zip(self.adversarials.data())
            .enumerate()
        {
            if (a - o).abs() > bound {
                return Err(Error::Contract(format!(
                    "pixel {i}: |{a} - {o}| exceeds epsilon {}",
                    self.epsilon
                )));
            }
            if a < self.clip_min || a > self.clip_max {
                return Err(Error::Contract(format!(
                    "pixel {i}: {a} outside clip range [{}, {}]",
                    self.clip_min, self.clip_max
                )));
            }
        }
        Ok(())
    }
}

/// Generate PGD adversarials against `model` (gradients from `model` itself).
pub fn pgd(
    model: &Model<f32>,
    images: &Tensor<f32>,
    labels: &[u32],
    spec: &AttackSpec,
) -> Result<AdversarialBatch> {
    pgd_with_gradients_from(model, model.name.clone(), images, labels, spec)
}

/// PGD for a quantized model. Quantized forward passes are non-differentiable,
/// so gradients come from the full-precision twin that shares its
/// pre-quantization weights; everything else matches `pgd`.
pub fn surrogate_gradient_attack(
    qmodel: &QuantizedModel,
    twin: &Model<f32>,
    images: &Tensor<f32>,
    labels: &[u32],
    spec: &AttackSpec,
) -> Result<AdversarialBatch> {
    if qmodel.arch() != twin.arch() {
        return Err(Error::Contract(format!(
            "quantized model architecture {:?} does not match twin {:?}",
            qmodel.arch().id(),
            twin.arch().id()
        )));
    }
    pgd_with_gradients_from(twin, qmodel.name.clone(), images, labels, spec)
}

fn pgd_with_gradients_from(
    grad_model: &Model<f32>,
    generator: String,
    images: &Tensor<f32>,
    labels: &[u32],
    spec: &AttackSpec,
) -> Result<AdversarialBatch> {
    spec.validate()?;
    if images.shape().len() != 4 {
        return Err(Error::Dimension(format!(
            "expected [N,C,H,W] images, got {:?}",
            images.shape()
        )));
    }
    let n = images.shape()[0];
    if n != labels.len() {
        return Err(Error::Consistency(format!(
            "{n} images vs {} labels",
            labels.len()
        )));
    }
    if let Some(p) = images
        .data()
        .iter()
        .find(|p| **p < spec.clip_min || **p > spec.clip_max)
    {
        return Err(Error::Contract(format!(
            "input pixel {p} outside clip range [{}, {}]",
            spec.clip_min, spec.clip_max
        )));
    }

    let orig = images.data();
    let mut adv: Vec<f32> = orig.to_vec();

    // Random start for the whole batch up front, so chunking never shifts
    // the RNG stream.
    if spec.random_start && spec.epsilon > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for (a, &o) in adv.iter_mut().zip(orig) {
            let delta: f32 = rng.gen_range(-spec.epsilon..=spec.epsilon);
            *a = (o + delta).clamp(spec.clip_min, spec.clip_max);
        }
    }

    let (c, h, w) = (images.shape()[1], images.shape()[2], images.shape()[3]);
    let stride = c * h * w;
    for start in (0..n).step_by(ATTACK_CHUNK) {
        let end = (start + ATTACK_CHUNK).min(n);
        let span = start * stride..end * stride;
        let chunk_orig = &orig[span.clone()];
        let chunk_adv = &mut adv[span];
        let chunk_labels = &labels[start..end];

        for _ in 0..spec.steps {
            let mut tape = Tape::new();
            let x = Tensor::new(vec![end - start, c, h, w], chunk_adv.to_vec())?;
            let fp = grad_model.forward(&mut tape, x, ForwardOpts::attack())?;
            let loss = tape.cross_entropy_mean(fp.logits_id, chunk_labels)?;
            tape.backward(loss)?;
            let grad = tape
                .grad(fp.input_id)
                .ok_or_else(|| Error::Contract("input gradient missing".into()))?;

            for ((a, &g), &o) in chunk_adv.iter_mut().zip(grad).zip(chunk_orig) {
                let step = match g.partial_cmp(&0.0) {
                    Some(std::cmp::Ordering::Greater) => spec.alpha,
                    Some(std::cmp::Ordering::Less) => -spec.alpha,
                    _ => 0.0,
                };
                let moved = *a + step;
                let projected = moved.clamp(o - spec.epsilon, o + spec.epsilon);
                *a = projected.clamp(spec.clip_min, spec.clip_max);
            }
        }
    }

    let batch = AdversarialBatch {
        originals: images.clone(),
        adversarials: Tensor::new(images.shape().to_vec(), adv)?,
        labels: labels.to_vec(),
        generator,
        epsilon: spec.epsilon,
        clip_min: spec.clip_min,
        clip_max: spec.clip_max,
    };
    batch.check_invariants()?;
    Ok(batch)
}

/// Fraction of adversarials the target classifies with the true label.
/// Self-adversarial accuracy when the target generated the batch, transfer
/// attack accuracy otherwise.
pub fn adversarial_accuracy(target: &Model<f32>, batch: &AdversarialBatch) -> Result<f64> {
    if let Some(l) = batch.labels.iter().find(|&&l| l as usize >= target.num_classes()) {
        return Err(Error::Contract(format!(
            "label {l} out of range for target with {} classes",
            target.num_classes()
        )));
    }
    accuracy_on(target, &batch.adversarials, &batch.labels)
}

/// Mean cross-entropy of `model` on a batch (used to confirm the attack
/// raises loss).
pub fn mean_loss(model: &Model<f32>, images: &Tensor<f32>, labels: &[u32]) -> Result<f64> {
    let n = images.shape()[0];
    let (c, h, w) = (images.shape()[1], images.shape()[2], images.shape()[3]);
    let stride = c * h * w;
    let mut total = 0.0f64;
    for start in (0..n).step_by(ATTACK_CHUNK) {
        let end = (start + ATTACK_CHUNK).min(n);
        let x = Tensor::new(
            vec![end - start, c, h, w],
            images.data()[start * stride..end * stride].to_vec(),
        )?;
        let mut tape = Tape::new();
        let fp = model.forward(&mut tape, x, ForwardOpts::inference())?;
        let loss = tape.cross_entropy_mean(fp.logits_id, &labels[start..end])?;
        total += tape.data(loss)[0] as f64 * (end - start) as f64;
    }
    Ok(total / n as f64)
}
