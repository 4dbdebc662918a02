//! Declarative sweeps over the observables, with crossing and collapse
//! analysis of the results.

pub mod analysis;
pub mod config;
pub mod records;
pub mod report;
pub mod runner;

pub use analysis::{collapse_fit, collapse_spread, find_crossing, Ansatz, CollapseResult, Crossing, Curve};
pub use config::{ExperimentConfig, ExperimentKind, OracleSettings, PlacementKind};
pub use records::{read_rows, Row, RunRecord, CSV_HEADER};
pub use runner::{jobs, run_experiment, run_job, worker_count, Job, RunOptions};
