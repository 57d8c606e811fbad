//! Modality-invariant training, evaluation metrics and the two fusion baselines.

mod baselines;
mod data;
mod loss;
mod metrics;
mod optim;
mod sampler;
mod trainer;

pub use baselines::{DecisionAverage, FeatureConcat};
pub use data::Split;
pub use loss::{batch_loss, compute_loss, Targets};
pub use metrics::{
    accuracy, calinski_harabasz, classification_metrics, keypoint_metrics, procrustes_align, silhouette_score,
    ClassificationMetrics,
};
pub use optim::{adamw_step, sgd_step, OptimState, OptimizerKind, TrainConfig};
pub use sampler::{binomial_count_pmf, sample_existence_list, ExistenceList, OccurrenceStats};
pub use trainer::{evaluate_subset, predict, train_model, History, HistoryEntry, Predictions, SubsetMetrics};
