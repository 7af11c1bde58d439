//! Post-training 8-bit weight quantization.
//!
//! Per-tensor asymmetric affine scheme over weight tensors only (biases and
//! activations stay full precision):
//!
//! ```text
//! scale      = (max_w - min_w) / 255        (floored at 1e-12)
//! zero_point = clamp(round(-min_w / scale), 0, 255)
//! q          = clamp(round(w / scale) + zero_point, 0, 255)
//! dequant(q) = scale * (q - zero_point)
//! ```
//!
//! Rounding is half-away-from-zero. An exact 0.0 weight always maps to the
//! code `zero_point` and back to exactly 0.0, so pruned entries survive
//! quantization untouched.

use crate::error::Result;
use crate::model::{Architecture, MaskSet, Model, ParamEntry, ParamKind};
use crate::tensor::Tensor;

const SCALE_FLOOR: f64 = 1e-12;

/// Affine quantization parameters for one tensor. The scale is kept in f64
/// so the code math is exact to well below the round-trip error budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: u8,
}

impl QuantParams {
    /// Derive parameters from a tensor's observed range.
    pub fn from_range(min_w: f32, max_w: f32) -> Self {
        let scale = ((f64::from(max_w) - f64::from(min_w)) / 255.0).max(SCALE_FLOOR);
        let zp = (-f64::from(min_w) / scale).round().clamp(0.0, 255.0) as u8;
        QuantParams {
            scale,
            zero_point: zp,
        }
    }

    pub fn quantize_one(&self, w: f32) -> u8 {
        let q = (f64::from(w) / self.scale).round() + f64::from(self.zero_point);
        q.clamp(0.0, 255.0) as u8
    }

    pub fn dequantize_one(&self, code: u8) -> f32 {
        (self.scale * (f64::from(code) - f64::from(self.zero_point))) as f32
    }
}

/// 8-bit codes plus the affine parameters that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub codes: Vec<u8>,
    pub params: QuantParams,
}

impl QuantizedTensor {
    pub fn quantize(tensor: &Tensor<f32>) -> Self {
        let data = tensor.data();
        let (mut min_w, mut max_w) = (f32::INFINITY, f32::NEG_INFINITY);
        for &v in data {
            min_w = min_w.min(v);
            max_w = max_w.max(v);
        }
        if data.is_empty() {
            min_w = 0.0;
            max_w = 0.0;
        }
        let params = QuantParams::from_range(min_w, max_w);
        let codes = data.iter().map(|&w| params.quantize_one(w)).collect();
        QuantizedTensor {
            shape: tensor.shape().to_vec(),
            codes,
            params,
        }
    }

    pub fn dequantize(&self) -> Tensor<f32> {
        let data: Vec<f32> = self.codes.iter().map(|&c| self.params.dequantize_one(c)).collect();
        Tensor::new(self.shape.clone(), data).expect("finite dequantized values")
    }
}

/// One model parameter inside a quantized model: weights carry codes,
/// biases keep their full-precision values.
#[derive(Debug, Clone)]
pub struct QuantEntry {
    pub name: String,
    pub kind: ParamKind,
    pub prunable: bool,
    pub payload: QuantPayload,
}

#[derive(Debug, Clone)]
pub enum QuantPayload {
    Quantized(QuantizedTensor),
    Full(Tensor<f32>),
}

/// A model with 8-bit weight codes. Forward passes run on the dequantized
/// weights; the struct keeps a link to its full-precision twin checkpoint
/// for surrogate-gradient attacks.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    arch: Architecture,
    pub name: String,
    seed: u64,
    entries: Vec<QuantEntry>,
    masks: Option<MaskSet>,
    /// Identifier or path of the full-precision twin.
    pub twin: Option<String>,
}

impl QuantizedModel {
    pub(crate) fn from_parts(
        arch: Architecture,
        name: String,
        seed: u64,
        entries: Vec<QuantEntry>,
        masks: Option<MaskSet>,
        twin: Option<String>,
    ) -> Self {
        QuantizedModel {
            arch,
            name,
            seed,
            entries,
            masks,
            twin,
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entries(&self) -> &[QuantEntry] {
        &self.entries
    }

    pub fn masks(&self) -> Option<&MaskSet> {
        self.masks.as_ref()
    }

    /// Materialize the dequantized full-precision model.
    pub fn dequantize_model(&self) -> Result<Model<f32>> {
        let entries: Vec<ParamEntry<f32>> = self
            .entries
            .iter()
            .map(|e| {
                let tensor = match &e.payload {
                    QuantPayload::Quantized(q) => q.dequantize(),
                    QuantPayload::Full(t) => t.clone(),
                }
                .with_requires_grad();
                ParamEntry {
                    name: e.name.clone(),
                    tensor,
                    kind: e.kind,
                    prunable: e.prunable,
                }
            })
            .collect();
        Model::from_parts(
            self.arch.clone(),
            self.name.clone(),
            self.seed,
            entries,
            self.masks.clone(),
        )
    }
}

/// Quantize every weight tensor of a frozen model to 8 bits.
pub fn quantize_model(model: &Model<f32>) -> QuantizedModel {
    let entries = model
        .params()
        .entries()
        .iter()
        .map(|e| {
            let payload = match e.kind {
                ParamKind::Weight => QuantPayload::Quantized(QuantizedTensor::quantize(&e.tensor)),
                ParamKind::Bias => QuantPayload::Full(e.tensor.clone()),
            };
            QuantEntry {
                name: e.name.clone(),
                kind: e.kind,
                prunable: e.prunable,
                payload,
            }
        })
        .collect();
    QuantizedModel {
        arch: model.arch().clone(),
        name: format!("{}-q8", model.name),
        seed: model.seed(),
        entries,
        masks: model.masks().cloned(),
        twin: Some(model.name.clone()),
    }
}

/// Logits of the quantized model on a batch (weight-only quantization:
/// the forward math runs in f32 on dequantized weights).
pub fn forward_quantized(qmodel: &QuantizedModel, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    qmodel.dequantize_model()?.logits(images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    #[test]
    fn constant_zero_tensor_round_trips_exactly() {
        let t = Tensor::<f32>::zeros(vec![4]);
        let q = QuantizedTensor::quantize(&t);
        assert!(q.codes.iter().all(|&c| c == q.params.zero_point));
        assert!(q.dequantize().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_range_matches_hand_computed_affine() {
        // w in [-1, 1]: scale = 2/255, zero_point = round(127.5) = 128,
        // w = 0 -> code 128 -> dequantizes to exactly 0.0.
        let t = Tensor::new(vec![3], vec![-1.0f32, 0.0, 1.0]).unwrap();
        let q = QuantizedTensor::quantize(&t);
        assert!((q.params.scale - 2.0 / 255.0).abs() < 1e-9);
        assert_eq!(q.params.zero_point, 128);
        assert_eq!(q.codes[1], 128);
        assert_eq!(q.dequantize().data()[1], 0.0);
        assert_eq!(q.codes[0], 0);
        assert_eq!(q.codes[2], 255);
    }

    #[test]
    fn ramp_round_trip_error_bounded_by_half_scale() {
        // exhaust all 256 codes with a fine ramp over [-1, 1]
        let n = 2048;
        let data: Vec<f32> = (0..n)
            .map(|i| -1.0 + 2.0 * i as f32 / (n - 1) as f32)
            .collect();
        let t = Tensor::new(vec![n], data.clone()).unwrap();
        let q = QuantizedTensor::quantize(&t);
        let seen: std::collections::BTreeSet<u8> = q.codes.iter().copied().collect();
        assert_eq!(seen.len(), 256);
        let bound = q.params.scale / 2.0 + 1e-7;
        for (&w, &c) in data.iter().zip(&q.codes) {
            let back = q.params.dequantize_one(c);
            assert!(
                (f64::from(back) - f64::from(w)).abs() <= bound,
                "{w} -> {c} -> {back}"
            );
        }
    }

    #[test]
    fn exact_zero_weights_stay_exactly_zero() {
        let t = Tensor::new(vec![5], vec![-0.73f32, 0.0, 0.31, 0.0, 0.9]).unwrap();
        let q = QuantizedTensor::quantize(&t);
        let back = q.dequantize();
        assert_eq!(back.data()[1], 0.0);
        assert_eq!(back.data()[3], 0.0);
        assert_eq!(q.codes[1], q.params.zero_point);
    }

    #[test]
    fn quantization_is_idempotent_on_dequantized_values() {
        let mut model = Model::<f32>::new(
            Architecture::MiniCnn {
                in_channels: 1,
                height: 8,
                width: 8,
                num_classes: 4,
            },
            11,
        );
        // make one weight exactly zero to mimic pruning
        model.params_mut().entries_mut()[0].tensor.data_mut()[0] = 0.0;
        let q1 = quantize_model(&model);
        let deq = q1.dequantize_model().unwrap();
        let q2 = quantize_model(&deq);
        for (a, b) in q1.entries().iter().zip(q2.entries()) {
            match (&a.payload, &b.payload) {
                (QuantPayload::Quantized(x), QuantPayload::Quantized(y)) => {
                    assert_eq!(x.codes, y.codes, "{}", a.name);
                    assert_eq!(x.params.zero_point, y.params.zero_point);
                }
                (QuantPayload::Full(x), QuantPayload::Full(y)) => {
                    assert_eq!(x.data(), y.data());
                }
                _ => panic!("payload kind changed for {}", a.name),
            }
        }
    }

    #[test]
    fn grid_aligned_weights_forward_identically() {
        // Weights placed exactly on a self-consistent code grid (power-of-two
        // scale, codes 0 and 255 present) re-derive the same affine, so the
        // quantizer is the identity and logits match bit for bit.
        let mut model = Model::<f32>::new(
            Architecture::MiniCnn {
                in_channels: 1,
                height: 8,
                width: 8,
                num_classes: 3,
            },
            7,
        );
        let params = QuantParams {
            scale: 1.0 / 256.0,
            zero_point: 128,
        };
        for e in model.params_mut().entries_mut() {
            if e.kind == ParamKind::Weight {
                for (i, w) in e.tensor.data_mut().iter_mut().enumerate() {
                    let code = match i {
                        0 => 0,
                        1 => 255,
                        _ => ((i * 37) % 256) as u8,
                    };
                    *w = params.dequantize_one(code);
                }
            }
        }
        let q = quantize_model(&model);
        for e in q.entries() {
            if let QuantPayload::Quantized(t) = &e.payload {
                assert_eq!(t.params.scale, params.scale, "{}", e.name);
                assert_eq!(t.params.zero_point, params.zero_point, "{}", e.name);
            }
        }
        let images = Tensor::new(vec![2, 1, 8, 8], vec![0.25; 128]).unwrap();
        let full = model.logits(&images).unwrap();
        let quant = forward_quantized(&q, &images).unwrap();
        assert_eq!(full.data(), quant.data());
    }
}
