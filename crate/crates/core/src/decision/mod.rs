//! Decision boundaries from a small set of training-distribution samples,
//! ID/CD/OOD labels, quadrant metrics and the exponential error fit.

mod boundary;
mod fit;
mod metrics;

pub use boundary::{
    certificate_boundary, classify, error_boundary, DecisionBoundary, FineLabel, Label, DEFAULT_ALPHA, DEFAULT_BETA,
};
pub use fit::{fit_error_curve, predict_error, ErrorFit, DEFAULT_BAND_PERCENTILE};
pub use metrics::{quadrant_counts, quadrant_metrics, Metrics, QuadrantCounts};
