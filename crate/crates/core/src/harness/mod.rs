//! Experiment configuration, synthetic data, checkpoints, reports and the commands that
//! tie them together.

mod checkpoint;
mod config;
mod data;
mod report;
mod run;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{AblateSection, DataSection, ExperimentConfig, ModalitySection, ModelSection, Preset};
pub use data::{generate_synthetic_dataset, GroundTruth, SyntheticDataConfig, SyntheticDataset};
pub use report::{enumerate_subsets, subset_label, write_json, ExperimentReport, ReportMetadata, ReportRow};
pub use run::{run_experiment, run_with_config, Command, Experiment, ModelKind, RunOptions, RunOutcome};
