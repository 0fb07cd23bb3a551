//! Detection metrics and image-score aggregation.

mod aggregate;
mod evaluate;
mod rank;

pub use aggregate::{image_score, TopFraction};
pub use evaluate::{
    evaluate, evaluate_manifest, write_reports_csv, EvalImage, MetricsReport, Scope,
    REPORT_HEADER,
};
pub use rank::{auroc, average_precision, roc_curve, ScoredSample};
