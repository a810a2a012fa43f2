//! Quantitative evaluation and the Multi-ESC50 dataset builder.

pub mod dataset;
pub mod metrics;
pub mod report;

pub use dataset::{build_multi_esc50, DatasetEntry, DatasetManifest, PairEntry, PairSpec};
pub use metrics::{clipscore, clipscore_f64, inception_score, inception_score_rows, yolo_score};
pub use report::{evaluate_dataset, parse_metrics, EvalOptions, Metric, MetricReport};
