//! Training, evaluation, prediction and reporting.

pub mod checkpoint;
pub mod eval;
pub mod optim;
pub mod report;
pub mod study;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointMeta, LogRecord, FORMAT_VERSION};
pub use eval::{evaluate, evaluate_samples, load_model, predict_file, score, LoadedModel};
pub use optim::{learning_rate, AdamW};
pub use report::{render_scatter, render_table, write_report};
pub use train::{objective, train, Trainer};
pub use study::{run_study, StudyResult, StudyRun, StudySpec};
