//! Metrics, anomaly ROC analysis, Turing-test statistics, label voting and
//! experiment runners.

pub mod experiment;
pub mod metrics;
pub mod roc;
pub mod turing;
pub mod votes;

pub use metrics::{balanced_accuracy, metrics_report, MetricsReport};
pub use roc::{auc_pairwise, kde, roc_auc, silverman_bandwidth, AnomalyReport, KdeCurve};
pub use turing::{turing_metrics, wilson_interval, Judgment, TuringReport, Z_95};
pub use votes::{confidence_confusion_matrix, majority_vote, pairwise_levels, ConfidenceMatrix};
pub use experiment::{run_experiment, ExperimentKind, ExperimentOutcome, ExperimentSpec};
