//! Anomaly maps, image scores and evaluation metrics.

mod map;
mod metrics;
mod report;

pub use map::{anomaly_map, gaussian_smooth, upsample_bilinear, AnomalyResult};
pub use metrics::{aupro, auroc, average_precision, label_regions, Connectivity, MapView};
pub use report::{
    category_metrics, evaluate, ground_truth_results, report_from_results, score_samples, CategoryMetrics,
    MetricsReport,
};
