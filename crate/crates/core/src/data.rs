//! Datasets: IDX file loading, deterministic synthetic blobs, and shuffled
//! mini-batch iteration.

use std::fs::File;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// An immutable image-classification dataset. Pixels are `f32` in `[0,1]`,
/// labels are class indices below `num_classes`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    images: Tensor<f32>,
    labels: Vec<u32>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        images: Tensor<f32>,
        labels: Vec<u32>,
        num_classes: usize,
    ) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Dimension(format!(
                "dataset images must be [N,C,H,W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images vs {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(p) = images.data().iter().find(|p| **p < 0.0 || **p > 1.0) {
            return Err(Error::Contract(format!("pixel {p} outside [0,1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Index(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            name: name.into(),
            split,
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Per-sample shape `(C, H, W)`.
    pub fn sample_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Gather the samples at `indices` into a batch tensor plus labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<u32>) {
        let (c, h, w) = self.sample_shape();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let images = Tensor::new(vec![indices.len(), c, h, w], data).expect("slice of valid data");
        (images, labels)
    }

    /// A fixed, seeded subset of the dataset (used for adversarial
    /// evaluation). The subset is a pure function of (seed, n).
    pub fn seeded_subset(&self, n: usize, subset_seed: u64) -> (Tensor<f32>, Vec<u32>) {
        let n = n.min(self.len());
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(subset_seed);
        idx.shuffle(&mut rng);
        idx.truncate(n);
        self.gather(&idx)
    }
}

// ── IDX format ─────────────────────────────────────────────────────────

fn read_u32_be(buf: &[u8], off: usize, path: &Path) -> Result<u32> {
    if off + 4 > buf.len() {
        return Err(Error::Format(format!(
            "{}: truncated header",
            path.display()
        )));
    }
    Ok(u32::from_be_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]]))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?
        .read_to_end(&mut buf)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(buf)
}

/// Load a big-endian IDX image/label file pair (the MNIST container format).
/// Bytes scale to pixels as `v / 255`.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: Split,
) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();

    let ibuf = read_file(images_path)?;
    let magic = read_u32_be(&ibuf, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let n = read_u32_be(&ibuf, 4, images_path)? as usize;
    let rows = read_u32_be(&ibuf, 8, images_path)? as usize;
    let cols = read_u32_be(&ibuf, 12, images_path)? as usize;
    let expected = 16 + n * rows * cols;
    if ibuf.len() != expected {
        return Err(Error::Integrity(format!(
            "{}: payload is {} bytes, header implies {expected}",
            images_path.display(),
            ibuf.len()
        )));
    }

    let lbuf = read_file(labels_path)?;
    let magic = read_u32_be(&lbuf, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let ln = read_u32_be(&lbuf, 4, labels_path)? as usize;
    if lbuf.len() != 8 + ln {
        return Err(Error::Integrity(format!(
            "{}: payload is {} bytes, header implies {}",
            labels_path.display(),
            lbuf.len(),
            8 + ln
        )));
    }
    if ln != n {
        return Err(Error::Consistency(format!(
            "{} images but {ln} labels",
            n
        )));
    }

    let pixels: Vec<f32> = ibuf[16..].iter().map(|&b| f32::from(b) / 255.0).collect();
    let labels: Vec<u32> = lbuf[8..].iter().map(|&b| u32::from(b)).collect();
    let num_classes = labels.iter().copied().max().map_or(1, |m| m as usize + 1);
    let images = Tensor::new(vec![n, 1, rows, cols], pixels)?;
    Dataset::new("idx", split, images, labels, num_classes)
}

// ── Synthetic blobs ────────────────────────────────────────────────────

/// Configuration for the deterministic blob generator. Each class is a
/// Gaussian bump at a class-specific grid location; samples add seeded
/// pixel noise and are clipped to `[0,1]`.
#[derive(Debug, Clone)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub per_class: usize,
    /// (C, H, W)
    pub image_shape: (usize, usize, usize),
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f32,
    /// Bump radius as a fraction of `min(H, W)`.
    pub sigma_frac: f32,
    /// Peak height of the class bump above the background. Keeping this a
    /// small multiple of 8/255 keeps classification margins inside the reach
    /// of the standard attack budget.
    pub amplitude: f32,
    /// Background gray level.
    pub background: f32,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            num_classes: 10,
            per_class: 200,
            image_shape: (1, 16, 16),
            noise: 0.30,
            sigma_frac: 0.13,
            amplitude: 0.22,
            background: 0.5,
            seed: 0,
        }
    }
}

/// Generate a blob dataset. Train and test splits draw from disjoint seeded
/// noise streams, so the splits never share a sample.
pub fn synthetic_blobs(spec: &BlobSpec, split: Split) -> Result<Dataset> {
    let (c, h, w) = spec.image_shape;
    if c == 0 || h == 0 || w == 0 || spec.num_classes == 0 {
        return Err(Error::Dimension(format!(
            "degenerate blob shape {:?} / {} classes",
            spec.image_shape, spec.num_classes
        )));
    }
    if spec.per_class < 1 {
        return Err(Error::Contract("per_class must be >= 1".into()));
    }

    let sigma = spec.sigma_frac * h.min(w) as f32;
    let centers = class_centers(spec.num_classes, h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, split.as_str()));

    let n = spec.num_classes * spec.per_class;
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.num_classes {
        let (cy, cx) = centers[class];
        for _ in 0..spec.per_class {
            for _ in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let dy = y as f32 - cy;
                        let dx = x as f32 - cx;
                        let bump = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                        let noise: f32 = if spec.noise > 0.0 {
                            rng.sample::<f32, _>(rand_distr::StandardNormal) * spec.noise
                        } else {
                            0.0
                        };
                        data.push((spec.background + spec.amplitude * bump + noise).clamp(0.0, 1.0));
                    }
                }
            }
            labels.push(class as u32);
        }
    }
    let images = Tensor::new(vec![n, c, h, w], data)?;
    Dataset::new("blobs", split, images, labels, spec.num_classes)
}

/// Class centers on a near-square grid with a half-cell margin.
fn class_centers(num_classes: usize, h: usize, w: usize) -> Vec<(f32, f32)> {
    let cols = (num_classes as f32).sqrt().ceil() as usize;
    let rows = num_classes.div_ceil(cols);
    (0..num_classes)
        .map(|k| {
            let r = k / cols;
            let c = k % cols;
            let cy = (r as f32 + 0.5) / rows as f32 * h as f32;
            let cx = (c as f32 + 0.5) / cols as f32 * w as f32;
            (cy, cx)
        })
        .collect()
}

// ── Batching ───────────────────────────────────────────────────────────

/// Yields shuffled mini-batches; one epoch visits every index exactly once
/// and the order is a pure function of `(seed, epoch)`. `shuffle_seed: None`
/// iterates in index order.
pub struct BatchIterator {
    dataset: Arc<Dataset>,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    epoch: u64,
}

impl BatchIterator {
    pub fn new(dataset: Arc<Dataset>, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Contract("batch_size must be >= 1".into()));
        }
        Ok(BatchIterator {
            dataset,
            batch_size,
            shuffle_seed,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// The index order for the upcoming epoch.
    pub fn epoch_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.dataset.len()).collect();
        if let Some(s) = self.shuffle_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_idx(s, "epoch", self.epoch));
            idx.shuffle(&mut rng);
        }
        idx
    }

    /// Visit every batch of one epoch (the final partial batch included),
    /// then advance the epoch counter.
    pub fn for_each_batch<F>(&mut self, mut f: F) -> Result<()>
    where
        F: FnMut(&Tensor<f32>, &[u32]) -> Result<()>,
    {
        let order = self.epoch_order();
        for chunk in order.chunks(self.batch_size) {
            let (images, labels) = self.dataset.gather(chunk);
            f(&images, &labels)?;
        }
        self.epoch += 1;
        Ok(())
    }
}
