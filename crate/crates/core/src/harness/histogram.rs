//! Weight-value histograms of the kept (unpruned) parameters, captured
//! before fine-tuning so they show the effect of the pruning operation
//! alone.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{MaskSet, Model};

/// Histogram of kept prunable weight values: uniform bins over a weight
/// range, counts summing to the kept-parameter count.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramExport {
    /// `bins + 1` edges, uniform.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub method: String,
    pub compression: f64,
    pub before_finetune: bool,
}

impl HistogramExport {
    pub fn kept_total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// CSV with header `bin_lo,bin_hi,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{:.9},{:.9},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| Error::Io(format!("{}: {e}", parent.display())))?;
            }
        }
        std::fs::write(path, self.to_csv()).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }
}

/// Observed min/max over a model's prunable weights (shared bin range for
/// comparable exports across methods).
pub fn weight_range(model: &Model<f32>) -> Option<(f32, f32)> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for e in model.params().prunable() {
        for &w in e.tensor.data() {
            lo = lo.min(w);
            hi = hi.max(w);
        }
    }
    (lo <= hi).then_some((lo, hi))
}

/// Histogram of the weight values still kept by `masks`. `range: None` uses
/// the observed range of the kept values; values outside an explicit range
/// clamp into the end bins so counts always sum to the kept count.
pub fn export_histogram(
    model: &Model<f32>,
    masks: &MaskSet,
    bins: usize,
    range: Option<(f32, f32)>,
) -> Result<HistogramExport> {
    if bins == 0 {
        return Err(Error::Contract("histogram needs at least one bin".into()));
    }
    masks.check_alignment(model)?;
    let mut kept_values: Vec<f64> = Vec::new();
    for e in model.params().prunable() {
        let m = masks.entry(&e.name).expect("alignment checked");
        for (&w, &keep) in e.tensor.data().iter().zip(&m.keep) {
            if keep == 1 {
                kept_values.push(f64::from(w));
            }
        }
    }
    if kept_values.is_empty() {
        return Err(Error::Contract(
            "empty histogram: masks keep zero parameters".into(),
        ));
    }

    let (lo, hi) = match range {
        Some((lo, hi)) => (f64::from(lo), f64::from(hi)),
        None => {
            let lo = kept_values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = kept_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        }
    };
    if hi < lo {
        return Err(Error::Contract(format!("histogram range [{lo}, {hi}] is empty")));
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0u64; bins];
    for v in kept_values {
        let idx = if width == 0.0 {
            0
        } else {
            (((v - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize
        };
        counts[idx] += 1;
    }
    Ok(HistogramExport {
        edges,
        counts,
        method: masks.method.clone(),
        compression: masks.compression,
        before_finetune: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, MaskEntry};

    fn cnn(seed: u64) -> Model<f32> {
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
    fn all_ones_mask_histograms_the_full_distribution() {
        let model = cnn(1);
        let masks = MaskSet::all_ones(&model);
        let h = export_histogram(&model, &masks, 16, None).unwrap();
        assert_eq!(h.kept_total() as usize, model.params().prunable_len());
        assert_eq!(h.counts.len(), 16);
        assert_eq!(h.edges.len(), 17);
    }

    #[test]
    fn counts_sum_to_kept_count() {
        let model = cnn(2);
        let entries: Vec<MaskEntry> = model
            .params()
            .prunable()
            .map(|e| MaskEntry {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                keep: (0..e.tensor.numel()).map(|i| u8::from(i % 4 != 1)).collect(),
            })
            .collect();
        let masks = MaskSet::new("gradient", "global", 4.0 / 3.0, entries).unwrap();
        let h = export_histogram(&model, &masks, 64, weight_range(&model)).unwrap();
        assert_eq!(h.kept_total() as usize, masks.kept_count());
        assert_eq!(h.method, "gradient");
    }

    #[test]
    fn zero_kept_parameters_is_an_error() {
        let model = cnn(3);
        let entries: Vec<MaskEntry> = model
            .params()
            .prunable()
            .map(|e| MaskEntry {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                keep: vec![0u8; e.tensor.numel()],
            })
            .collect();
        let masks = MaskSet::new("random", "global", f64::INFINITY, entries).unwrap();
        let err = export_histogram(&model, &masks, 64, None).unwrap_err();
        assert!(matches!(err, Error::Contract(m) if m.contains("empty histogram")));
    }

    #[test]
    fn csv_shape_is_bin_lo_hi_count() {
        let model = cnn(4);
        let masks = MaskSet::all_ones(&model);
        let h = export_histogram(&model, &masks, 4, Some((-1.0, 1.0))).unwrap();
        let csv = h.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "bin_lo,bin_hi,count");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("-1.000000000,-0.500000000,"));
    }

    #[test]
    fn out_of_range_values_clamp_into_end_bins() {
        let model = cnn(5);
        let masks = MaskSet::all_ones(&model);
        let h = export_histogram(&model, &masks, 8, Some((-0.01, 0.01))).unwrap();
        assert_eq!(h.kept_total() as usize, model.params().prunable_len());
        assert!(h.counts[0] > 0);
        assert!(h.counts[7] > 0);
    }
}
