//! Ranking metrics, reports, ensembling and cross-validation.

mod cv;
mod metrics;
mod report;
mod scores;

pub use cv::{cross_validate, CvReport, FoldResult, MeanMetrics};
pub use metrics::{
    average_precision, correlation_matrix, ensemble_max, ensemble_mean, map_class, map_image, ranking,
    top_k_accuracy, CorrelationMatrix, MeanAp,
};
pub use report::{lesion_report, location_report, ClassAp, LesionReport, LocationReport, MetricReport};
pub use scores::ScoreMatrix;
