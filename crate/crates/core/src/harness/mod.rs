//! Continual-learning experiments: configuration, the per-task protocol,
//! evaluation and the files a run leaves behind.

pub mod config;
pub mod eval;
pub mod run;

pub use config::{ExperimentConfig, MethodKind};
pub use eval::{accuracy, read_metrics, EvalMatrix};
pub use run::{run, run_prepared, GanRecord, PreparedData, RunOutput};
