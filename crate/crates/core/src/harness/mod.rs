//! Experiment orchestration: configuration, artifacts, evaluation and reports.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod pipeline;
pub mod report;

pub use checkpoint::{load_model, save_model, Checkpoint, TensorEntry};
pub use config::{apply_override, ExperimentConfig, REFERENCE_HORIZON, REFERENCE_TRAJECTORIES};
pub use dataset::{round_sig, Dataset, ObsStats, StepRecord, STORED_DIGITS};
pub use metrics::*;
pub use pipeline::{collect_normal, episode_seeds, read_json, write_json, HeldoutMae, Pipeline, StageReport, Thresholds, PERTURBED_TOL};
pub use report::{markdown, parse_markdown_tables, write_report, ReportFormat};
