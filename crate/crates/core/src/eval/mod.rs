//! Metrics, experiment drivers, knowledge curves and rater agreement.

pub mod curves;
pub mod experiment;
pub mod irr;
pub mod metrics;

pub use curves::{knowledge_curves, write_plots, CurvePoint, CurveReport, CurveSeries};
pub use experiment::{grid_search, run_experiment, ExperimentConfig, GridSpec, Method};
pub use irr::{irr_metrics, krippendorff_alpha, overlap, Agreement, RatingMatrix};
pub use metrics::{accuracy, auc, compute_metrics, f1, majority_baseline, MeanStd, MetricReport, Scores};
