//! Synthetic benchmark suite, evaluation, checkpoints and reports.

pub mod checkpoint;
mod metrics;
pub mod report;
pub mod tasks;

pub use metrics::{evaluate, exact_match_accuracy, EvalReport, TaskScore};
pub use report::{emit_report, RunRecord};
pub use tasks::{generate_dataset, task_model_config, Dataset, TaskKind, TaskMix};
