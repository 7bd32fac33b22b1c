//! Synthetic task, strategy sweeps, memory model and configuration files.

pub mod config_file;
pub mod experiment;
pub mod memory;
pub mod task;

pub use experiment::{run_experiment, run_experiment_with, Arm, ExperimentConfig, ExperimentReport, TrialRecord};
pub use memory::{memory_cost, CostEstimate, CostModelInput, CostStrategy};
pub use task::{generate_task, Dataset, SyntheticTaskConfig};
