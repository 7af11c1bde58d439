//! Binary container for models, quantized models, masks, and adversarial
//! batches. Round trips are bit-exact.
//!
//! Layout:
//!
//! ```text
//! magic    b"GAPW"
//! version  u32 LE (currently 1)
//! meta_len u32 LE
//! meta     UTF-8 JSON document (kind tag + names/shapes/seed/etc.)
//! payload  kind-specific binary sections (see below)
//! checksum u32 LE CRC-32 (IEEE) over every preceding byte
//! ```
//!
//! Payloads:
//! * `model`: raw little-endian f32 per parameter in declaration order, then,
//!   if masks are present, the mask bits of every prunable tensor
//!   concatenated row-major, LSB-first, zero-padded to a byte boundary.
//! * `model-q8`: per parameter, either `scale f32 LE + zero_point u8 + codes`
//!   (quantized weights) or raw f32 (full-precision entries), then mask bits
//!   as above.
//! * `advbatch`: originals f32 LE, adversarials f32 LE, labels u32 LE.
//! * `masks`: mask bits only.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::AdversarialBatch;
use crate::error::{Error, Result};
use crate::model::{Architecture, MaskEntry, MaskSet, Model, ParamEntry, ParamKind};
use crate::prune::{LayerGamma, PruneResult};
use crate::quant::{QuantEntry, QuantParams, QuantPayload, QuantizedModel, QuantizedTensor};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GAPW";
const VERSION: u32 = 1;

// ── CRC-32 (IEEE 802.3) ────────────────────────────────────────────────

fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xffff_ffffu32;
    for &b in bytes {
        crc ^= u32::from(b);
        for _ in 0..8 {
            let low = crc & 1;
            crc >>= 1;
            if low == 1 {
                crc ^= 0xedb8_8320;
            }
        }
    }
    !crc
}

// ── Metadata documents ─────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind")]
enum Meta {
    #[serde(rename = "model")]
    Model(ModelMeta),
    #[serde(rename = "model-q8")]
    ModelQ8(ModelQ8Meta),
    #[serde(rename = "advbatch")]
    AdvBatch(AdvBatchMeta),
    #[serde(rename = "masks")]
    Masks(MasksMeta),
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchMeta {
    id: String,
    in_channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
}

impl ArchMeta {
    fn of(arch: &Architecture) -> Self {
        match arch {
            Architecture::Mlp784x128x64x10 => ArchMeta {
                id: arch.id().into(),
                in_channels: 1,
                height: 28,
                width: 28,
                num_classes: 10,
            },
            Architecture::MiniCnn {
                in_channels,
                height,
                width,
                num_classes,
            } => ArchMeta {
                id: arch.id().into(),
                in_channels: *in_channels,
                height: *height,
                width: *width,
                num_classes: *num_classes,
            },
        }
    }

    fn build(&self) -> Result<Architecture> {
        Architecture::from_id(
            &self.id,
            (self.in_channels, self.height, self.width),
            self.num_classes,
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    kind: String,
    shape: Vec<usize>,
    prunable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskSetMeta {
    method: String,
    scope: String,
    compression: f64,
    kept: usize,
    entries: Vec<MaskEntryMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskEntryMeta {
    name: String,
    shape: Vec<usize>,
}

/// γ thresholds; `value: None` encodes +inf (scope kept nothing).
#[derive(Debug, Serialize, Deserialize)]
struct GammaMeta {
    layer: Option<String>,
    value: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PruneMeta {
    gamma: Vec<GammaMeta>,
    pruned_count: usize,
    kept_count: usize,
    warnings: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    architecture: ArchMeta,
    name: String,
    seed: u64,
    params: Vec<ParamMeta>,
    masks: Option<MaskSetMeta>,
    prune: Option<PruneMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QParamMeta {
    name: String,
    kind: String,
    shape: Vec<usize>,
    prunable: bool,
    quantized: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelQ8Meta {
    architecture: ArchMeta,
    name: String,
    seed: u64,
    twin: Option<String>,
    params: Vec<QParamMeta>,
    masks: Option<MaskSetMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdvBatchMeta {
    generator: String,
    count: usize,
    channels: usize,
    height: usize,
    width: usize,
    epsilon: f32,
    clip_min: f32,
    clip_max: f32,
}

#[derive(Debug, Serialize, Deserialize)]
struct MasksMeta {
    set: MaskSetMeta,
}

// ── Bit packing ────────────────────────────────────────────────────────

fn pack_bits(masks: &MaskSet) -> Vec<u8> {
    let total: usize = masks.entries().iter().map(|e| e.keep.len()).sum();
    let mut out = vec![0u8; total.div_ceil(8)];
    let mut pos = 0usize;
    for e in masks.entries() {
        for &b in &e.keep {
            if b == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], meta: &MaskSetMeta) -> Result<Vec<MaskEntry>> {
    let total: usize = meta.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if bytes.len() != total.div_ceil(8) {
        return Err(Error::Integrity(format!(
            "mask section holds {} bytes, {} bits expected",
            bytes.len(),
            total
        )));
    }
    let mut pos = 0usize;
    let mut entries = Vec::with_capacity(meta.entries.len());
    for em in &meta.entries {
        let numel: usize = em.shape.iter().product();
        let keep: Vec<u8> = (0..numel)
            .map(|_| {
                let bit = (bytes[pos / 8] >> (pos % 8)) & 1;
                pos += 1;
                bit
            })
            .collect();
        entries.push(MaskEntry {
            name: em.name.clone(),
            shape: em.shape.clone(),
            keep,
        });
    }
    Ok(entries)
}

fn mask_meta(masks: &MaskSet) -> MaskSetMeta {
    MaskSetMeta {
        method: masks.method.clone(),
        scope: masks.scope.clone(),
        compression: masks.compression,
        kept: masks.kept_count(),
        entries: masks
            .entries()
            .iter()
            .map(|e| MaskEntryMeta {
                name: e.name.clone(),
                shape: e.shape.clone(),
            })
            .collect(),
    }
}

fn mask_set_from(meta: &MaskSetMeta, entries: Vec<MaskEntry>) -> Result<MaskSet> {
    let set = MaskSet::new(meta.method.clone(), meta.scope.clone(), meta.compression, entries)?;
    if set.kept_count() != meta.kept {
        return Err(Error::Integrity(format!(
            "mask bits hold {} ones, metadata records {}",
            set.kept_count(),
            meta.kept
        )));
    }
    Ok(set)
}

// ── Reader/writer plumbing ─────────────────────────────────────────────

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(meta: &Meta) -> Result<Self> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let meta_bytes =
            serde_json::to_vec(meta).map_err(|e| Error::Format(format!("metadata encode: {e}")))?;
        buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta_bytes);
        Ok(Writer { buf })
    }

    fn f32s(&mut self, values: &[f32]) {
        self.buf.reserve(values.len() * 4);
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn f64(&mut self, value: f64) {
        self.buf.extend_from_slice(&value.to_le_bytes());
    }

    fn bytes(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    fn finish(mut self, path: &Path) -> Result<()> {
        let crc = crc32(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)
                    .map_err(|e| Error::Io(format!("{}: {e}", parent.display())))?;
            }
        }
        fs::write(path, &self.buf).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn open(path: &Path) -> Result<(Self, Meta)> {
        let buf = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        if buf.len() < 16 {
            return Err(Error::Format(format!(
                "{}: too short for a checkpoint container",
                path.display()
            )));
        }
        if &buf[0..4] != MAGIC {
            return Err(Error::Format(format!(
                "{}: bad magic {:?}, expected {MAGIC:?}",
                path.display(),
                &buf[0..4]
            )));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported version {version}",
                path.display()
            )));
        }
        let stored_crc = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
        let computed = crc32(&buf[..buf.len() - 4]);
        if stored_crc != computed {
            return Err(Error::Integrity(format!(
                "{}: checksum {computed:#010x} does not match stored {stored_crc:#010x}",
                path.display()
            )));
        }
        let meta_len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        if 12 + meta_len + 4 > buf.len() {
            return Err(Error::Integrity(format!(
                "{}: metadata length {meta_len} exceeds file",
                path.display()
            )));
        }
        let meta: Meta = serde_json::from_slice(&buf[12..12 + meta_len])
            .map_err(|e| Error::Format(format!("{}: metadata decode: {e}", path.display())))?;
        Ok((
            Reader {
                pos: 12 + meta_len,
                buf,
            },
            meta,
        ))
    }

    fn payload_end(&self) -> usize {
        self.buf.len() - 4
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.payload_end() {
            return Err(Error::Integrity(format!(
                "payload truncated: need {n} bytes at offset {}, payload ends at {}",
                self.pos,
                self.payload_end()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let raw = self.take(count * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f64(&mut self) -> Result<f64> {
        let raw = self.take(8)?;
        Ok(f64::from_le_bytes(raw.try_into().unwrap()))
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.payload_end() {
            return Err(Error::Integrity(format!(
                "{} unread payload bytes",
                self.payload_end() - self.pos
            )));
        }
        Ok(())
    }
}

// ── Model checkpoints ──────────────────────────────────────────────────

/// Save a full-precision model, optionally with the prune result that
/// produced its masks.
pub fn save_model(model: &Model<f32>, prune: Option<&PruneResult>, path: impl AsRef<Path>) -> Result<()> {
    let meta = Meta::Model(ModelMeta {
        architecture: ArchMeta::of(model.arch()),
        name: model.name.clone(),
        seed: model.seed(),
        params: model
            .params()
            .entries()
            .iter()
            .map(|e| ParamMeta {
                name: e.name.clone(),
                kind: e.kind.as_str().into(),
                shape: e.tensor.shape().to_vec(),
                prunable: e.prunable,
            })
            .collect(),
        masks: model.masks().map(mask_meta),
        prune: prune.map(|p| PruneMeta {
            gamma: p
                .gamma
                .iter()
                .map(|g| GammaMeta {
                    layer: g.layer.clone(),
                    value: g.value.is_finite().then_some(g.value),
                })
                .collect(),
            pruned_count: p.pruned_count,
            kept_count: p.kept_count,
            warnings: p.warnings.clone(),
        }),
    });
    let mut w = Writer::new(&meta)?;
    for e in model.params().entries() {
        w.f32s(e.tensor.data());
    }
    if let Some(masks) = model.masks() {
        w.bytes(&pack_bits(masks));
    }
    w.finish(path.as_ref())
}

/// Load a model checkpoint; `expect_arch` rejects mismatched architectures.
pub fn load_model(path: impl AsRef<Path>, expect_arch: Option<&str>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let (mut r, meta) = Reader::open(path)?;
    let Meta::Model(m) = meta else {
        return Err(Error::Format(format!(
            "{}: not a model checkpoint",
            path.display()
        )));
    };
    if let Some(expected) = expect_arch {
        if m.architecture.id != expected {
            return Err(Error::Format(format!(
                "{}: architecture is {:?}, expected {expected:?}",
                path.display(),
                m.architecture.id
            )));
        }
    }
    let arch = m.architecture.build()?;
    let mut entries = Vec::with_capacity(m.params.len());
    for pm in &m.params {
        let numel: usize = pm.shape.iter().product();
        let data = r.f32s(numel)?;
        let kind = match pm.kind.as_str() {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            other => return Err(Error::Format(format!("unknown parameter kind {other:?}"))),
        };
        let tensor = Tensor::new(pm.shape.clone(), data)?.with_requires_grad();
        entries.push(ParamEntry {
            name: pm.name.clone(),
            tensor,
            kind,
            prunable: pm.prunable,
        });
    }
    let masks = match &m.masks {
        Some(mm) => {
            let total: usize = mm.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
            let bytes = r.take(total.div_ceil(8))?.to_vec();
            Some(mask_set_from(mm, unpack_bits(&bytes, mm)?)?)
        }
        None => None,
    };
    r.done()?;
    Model::from_parts(arch, m.name, m.seed, entries, masks)
}

/// γ/count metadata stored alongside a pruned model, if any.
pub fn load_prune_info(path: impl AsRef<Path>) -> Result<Option<(Vec<LayerGamma>, usize, usize)>> {
    let (_, meta) = Reader::open(path.as_ref())?;
    let Meta::Model(m) = meta else { return Ok(None) };
    Ok(m.prune.map(|p| {
        (
            p.gamma
                .iter()
                .map(|g| LayerGamma {
                    layer: g.layer.clone(),
                    value: g.value.unwrap_or(f64::INFINITY),
                })
                .collect(),
            p.pruned_count,
            p.kept_count,
        )
    }))
}

// ── Quantized model checkpoints ────────────────────────────────────────

pub fn save_quantized(qmodel: &QuantizedModel, path: impl AsRef<Path>) -> Result<()> {
    let meta = Meta::ModelQ8(ModelQ8Meta {
        architecture: ArchMeta::of(qmodel.arch()),
        name: qmodel.name.clone(),
        seed: qmodel.seed(),
        twin: qmodel.twin.clone(),
        params: qmodel
            .entries()
            .iter()
            .map(|e| QParamMeta {
                name: e.name.clone(),
                kind: e.kind.as_str().into(),
                shape: match &e.payload {
                    QuantPayload::Quantized(q) => q.shape.clone(),
                    QuantPayload::Full(t) => t.shape().to_vec(),
                },
                prunable: e.prunable,
                quantized: matches!(e.payload, QuantPayload::Quantized(_)),
            })
            .collect(),
        masks: qmodel.masks().map(mask_meta),
    });
    let mut w = Writer::new(&meta)?;
    for e in qmodel.entries() {
        match &e.payload {
            QuantPayload::Quantized(q) => {
                w.f64(q.params.scale);
                w.bytes(&[q.params.zero_point]);
                w.bytes(&q.codes);
            }
            QuantPayload::Full(t) => w.f32s(t.data()),
        }
    }
    if let Some(masks) = qmodel.masks() {
        w.bytes(&pack_bits(masks));
    }
    w.finish(path.as_ref())
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    let path = path.as_ref();
    let (mut r, meta) = Reader::open(path)?;
    let Meta::ModelQ8(m) = meta else {
        return Err(Error::Format(format!(
            "{}: not a quantized model checkpoint",
            path.display()
        )));
    };
    let arch = m.architecture.build()?;
    let mut entries = Vec::with_capacity(m.params.len());
    for pm in &m.params {
        let numel: usize = pm.shape.iter().product();
        let kind = match pm.kind.as_str() {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            other => return Err(Error::Format(format!("unknown parameter kind {other:?}"))),
        };
        let payload = if pm.quantized {
            let scale = r.f64()?;
            let zero_point = r.take(1)?[0];
            let codes = r.take(numel)?.to_vec();
            QuantPayload::Quantized(QuantizedTensor {
                shape: pm.shape.clone(),
                codes,
                params: QuantParams { scale, zero_point },
            })
        } else {
            QuantPayload::Full(Tensor::new(pm.shape.clone(), r.f32s(numel)?)?)
        };
        entries.push(QuantEntry {
            name: pm.name.clone(),
            kind,
            prunable: pm.prunable,
            payload,
        });
    }
    let masks = match &m.masks {
        Some(mm) => {
            let total: usize = mm.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
            let bytes = r.take(total.div_ceil(8))?.to_vec();
            Some(mask_set_from(mm, unpack_bits(&bytes, mm)?)?)
        }
        None => None,
    };
    r.done()?;
    Ok(QuantizedModel::from_parts(
        arch, m.name, m.seed, entries, masks, m.twin,
    ))
}

// ── Adversarial batches ────────────────────────────────────────────────

pub fn save_adv_batch(batch: &AdversarialBatch, path: impl AsRef<Path>) -> Result<()> {
    let s = batch.originals.shape();
    let meta = Meta::AdvBatch(AdvBatchMeta {
        generator: batch.generator.clone(),
        count: s[0],
        channels: s[1],
        height: s[2],
        width: s[3],
        epsilon: batch.epsilon,
        clip_min: batch.clip_min,
        clip_max: batch.clip_max,
    });
    let mut w = Writer::new(&meta)?;
    w.f32s(batch.originals.data());
    w.f32s(batch.adversarials.data());
    for l in &batch.labels {
        w.bytes(&l.to_le_bytes());
    }
    w.finish(path.as_ref())
}

pub fn load_adv_batch(path: impl AsRef<Path>) -> Result<AdversarialBatch> {
    let path = path.as_ref();
    let (mut r, meta) = Reader::open(path)?;
    let Meta::AdvBatch(m) = meta else {
        return Err(Error::Format(format!(
            "{}: not an adversarial batch",
            path.display()
        )));
    };
    let shape = vec![m.count, m.channels, m.height, m.width];
    let numel: usize = shape.iter().product();
    let originals = Tensor::new(shape.clone(), r.f32s(numel)?)?;
    let adversarials = Tensor::new(shape, r.f32s(numel)?)?;
    let raw = r.take(m.count * 4)?;
    let labels = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    r.done()?;
    let batch = AdversarialBatch {
        originals,
        adversarials,
        labels,
        generator: m.generator,
        epsilon: m.epsilon,
        clip_min: m.clip_min,
        clip_max: m.clip_max,
    };
    batch.check_invariants()?;
    Ok(batch)
}

// ── Standalone mask files ──────────────────────────────────────────────

pub fn save_masks(masks: &MaskSet, path: impl AsRef<Path>) -> Result<()> {
    let meta = Meta::Masks(MasksMeta {
        set: mask_meta(masks),
    });
    let mut w = Writer::new(&meta)?;
    w.bytes(&pack_bits(masks));
    w.finish(path.as_ref())
}

pub fn load_masks(path: impl AsRef<Path>) -> Result<MaskSet> {
    let path = path.as_ref();
    let (mut r, meta) = Reader::open(path)?;
    let Meta::Masks(m) = meta else {
        return Err(Error::Format(format!(
            "{}: not a mask file",
            path.display()
        )));
    };
    let total: usize = m.set.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let bytes = r.take(total.div_ceil(8))?.to_vec();
    r.done()?;
    mask_set_from(&m.set, unpack_bits(&bytes, &m.set)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MaskEntry;

    fn cnn(seed: u64) -> Model<f32> {
        Model::new(
            Architecture::MiniCnn {
                in_channels: 1,
                height: 8,
                width: 8,
                num_classes: 4,
            },
            seed,
        )
    }

    fn masked_cnn(seed: u64) -> Model<f32> {
        let mut m = cnn(seed);
        let entries: Vec<MaskEntry> = m
            .params()
            .prunable()
            .map(|e| MaskEntry {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                keep: (0..e.tensor.numel()).map(|i| u8::from(i % 3 != 0)).collect(),
            })
            .collect();
        let masks = MaskSet::new("magnitude", "global", 1.5, entries).unwrap();
        m.apply_masks_permanently(masks).unwrap();
        m
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.gapw");
        let p2 = dir.path().join("b.gapw");
        let model = masked_cnn(3);
        save_model(&model, None, &p1).unwrap();
        let loaded = load_model(&p1, None).unwrap();
        save_model(&loaded, None, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        // parameters and masks round-trip exactly
        for (a, b) in model.params().entries().iter().zip(loaded.params().entries()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
            assert_eq!(a.prunable, b.prunable);
        }
        assert_eq!(model.masks().unwrap(), loaded.masks().unwrap());
        assert_eq!(loaded.seed(), 3);
    }

    #[test]
    fn wrong_architecture_is_an_explicit_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.gapw");
        save_model(&cnn(1), None, &p).unwrap();
        let err = load_model(&p, Some(crate::model::MLP_ID)).unwrap_err();
        assert!(matches!(err, Error::Format(m) if m.contains("MiniCNN")));
        assert!(load_model(&p, Some(crate::model::MINI_CNN_ID)).is_ok());
    }

    #[test]
    fn bad_magic_and_version_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.gapw");
        save_model(&cnn(1), None, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_model(&p, None), Err(Error::Format(_))));
    }

    #[test]
    fn corruption_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.gapw");
        save_model(&cnn(1), None, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_model(&p, None), Err(Error::Integrity(_))));
    }

    #[test]
    fn truncation_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.gapw");
        save_model(&cnn(1), None, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        // drop payload bytes but keep a valid checksum over the prefix
        let cut = bytes.len() - 200;
        let mut short = bytes[..cut].to_vec();
        let crc = crc32(&short);
        short.extend_from_slice(&crc.to_le_bytes());
        fs::write(&p, &short).unwrap();
        assert!(matches!(load_model(&p, None), Err(Error::Integrity(_))));
    }

    #[test]
    fn quantized_round_trip_preserves_codes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.gapw");
        let q = crate::quant::quantize_model(&masked_cnn(9));
        save_quantized(&q, &p).unwrap();
        let loaded = load_quantized(&p).unwrap();
        assert_eq!(loaded.name, q.name);
        assert_eq!(loaded.twin, q.twin);
        for (a, b) in q.entries().iter().zip(loaded.entries()) {
            match (&a.payload, &b.payload) {
                (QuantPayload::Quantized(x), QuantPayload::Quantized(y)) => {
                    assert_eq!(x.codes, y.codes);
                    assert_eq!(x.params, y.params);
                }
                (QuantPayload::Full(x), QuantPayload::Full(y)) => assert_eq!(x.data(), y.data()),
                _ => panic!("payload kind changed"),
            }
        }
        assert_eq!(q.masks(), loaded.masks());
    }

    #[test]
    fn masks_round_trip_standalone() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("masks.gapw");
        let model = masked_cnn(5);
        let masks = model.masks().unwrap().clone();
        save_masks(&masks, &p).unwrap();
        let loaded = load_masks(&p).unwrap();
        assert_eq!(masks, loaded);
    }
}
