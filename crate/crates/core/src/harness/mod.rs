//! Experiment orchestration: config parsing, the sweep over
//! (method, scope, compression) cells, metrics records, and CSV reports.

pub mod config;
pub mod histogram;
pub mod metrics;
pub mod sweep;

pub use config::{DatasetSection, ExperimentConfig};
pub use histogram::{export_histogram, weight_range, HistogramExport};
pub use metrics::{
    format_compression, read_metrics_csv, summarize, summary_csv, CellKey, Metric, MetricsRecord,
    SummaryRow,
};
pub use sweep::{run_sweep, transfer_attack_eval, AdvSource, CellFailure, CellFlag, SweepOutcome};
