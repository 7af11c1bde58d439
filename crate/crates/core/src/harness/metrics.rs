//! Metric records and aggregate reporting.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "model_id,method,scope,compression,quantized,trial,metric,value";
pub const SUMMARY_HEADER: &str = "method,scope,compression,quantized,metric,mean,std,trials,note";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    TestAcc,
    AdvAcc,
    TransferAcc,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::TestAcc, Metric::AdvAcc, Metric::TransferAcc];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::TestAcc => "test_acc",
            Metric::AdvAcc => "adv_acc",
            Metric::TransferAcc => "transfer_acc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "test_acc" => Ok(Metric::TestAcc),
            "adv_acc" => Ok(Metric::AdvAcc),
            "transfer_acc" => Ok(Metric::TransferAcc),
            other => Err(Error::Format(format!("unknown metric {other:?}"))),
        }
    }
}

/// One measurement row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub model_id: String,
    /// Pruning method, or "none" for the unpruned baseline.
    pub method: String,
    pub scope: String,
    pub compression: f64,
    pub quantized: bool,
    /// Trial seed.
    pub trial: u64,
    pub metric: Metric,
    pub value: f64,
}

/// Compressions print as "2" / "2.5": plain `Display` of the f64.
pub fn format_compression(p: f64) -> String {
    format!("{p}")
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.value) {
            return Err(Error::Contract(format!(
                "metric value {} outside [0,1]",
                self.value
            )));
        }
        Ok(())
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.6}",
            self.model_id,
            self.method,
            self.scope,
            format_compression(self.compression),
            self.quantized,
            self.trial,
            self.metric.as_str(),
            self.value
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(Error::Format(format!(
                "metrics row has {} fields, expected 8: {line:?}",
                parts.len()
            )));
        }
        let parse_err = |field: &str, v: &str| {
            Error::Format(format!("metrics row field {field} unparseable: {v:?}"))
        };
        Ok(MetricsRecord {
            model_id: parts[0].into(),
            method: parts[1].into(),
            scope: parts[2].into(),
            compression: parts[3].parse().map_err(|_| parse_err("compression", parts[3]))?,
            quantized: parts[4].parse().map_err(|_| parse_err("quantized", parts[4]))?,
            trial: parts[5].parse().map_err(|_| parse_err("trial", parts[5]))?,
            metric: Metric::parse(parts[6])?,
            value: parts[7].parse().map_err(|_| parse_err("value", parts[7]))?,
        })
    }
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "bad metrics header: {other:?}"
            )))
        }
    }
    lines.map(MetricsRecord::parse_csv_row).collect()
}

/// (model, method, scope, compression, quantized, trial, metric) must be
/// unique within one report.
pub fn check_unique(records: &[MetricsRecord]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for r in records {
        let key = (
            r.model_id.clone(),
            r.method.clone(),
            r.scope.clone(),
            format_compression(r.compression),
            r.quantized,
            r.trial,
            r.metric,
        );
        if !seen.insert(key) {
            return Err(Error::Consistency(format!(
                "duplicate record: {}",
                r.csv_row()
            )));
        }
    }
    Ok(())
}

/// Aggregation cell: everything but the trial axis.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct CellKey {
    pub method: String,
    pub scope: String,
    /// `format_compression` text keeps the key orderable.
    pub compression: String,
    pub quantized: bool,
    pub metric: Metric,
}

impl CellKey {
    pub fn of(r: &MetricsRecord) -> Self {
        CellKey {
            method: r.method.clone(),
            scope: r.scope.clone(),
            compression: format_compression(r.compression),
            quantized: r.quantized,
            metric: r.metric,
        }
    }
}

/// One `summary.csv` row: mean and sample standard deviation over trials.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub key: CellKey,
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
    pub note: String,
}

impl SummaryRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{},{}",
            self.key.method,
            self.key.scope,
            self.key.compression,
            self.key.quantized,
            self.key.metric.as_str(),
            self.mean,
            self.std,
            self.trials,
            self.note
        )
    }
}

/// Aggregate records per cell. Requested cells with no records are returned
/// in the second slot rather than silently dropped.
pub fn summarize(
    records: &[MetricsRecord],
    requested: Option<&[CellKey]>,
) -> (Vec<SummaryRow>, Vec<CellKey>) {
    let mut groups: BTreeMap<CellKey, Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry(CellKey::of(r)).or_default().push(r.value);
    }
    let rows: Vec<SummaryRow> = groups
        .iter()
        .map(|(key, values)| {
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                key: key.clone(),
                mean,
                std,
                trials: n,
                note: if n == 1 { "single-trial".into() } else { String::new() },
            }
        })
        .collect();
    let missing = match requested {
        Some(cells) => cells
            .iter()
            .filter(|c| !groups.contains_key(*c))
            .cloned()
            .collect(),
        None => Vec::new(),
    };
    (rows, missing)
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}
