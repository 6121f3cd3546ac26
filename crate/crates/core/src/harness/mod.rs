//! Task generation, configuration, training pipeline and experiment runner.

pub mod cache;
pub mod config;
pub mod experiment;
pub mod results;
pub mod stages;
pub mod tasks;

pub use cache::{Cache, Cached, CACHE_ENV};
pub use config::{content_hash, ExperimentConfig, MethodName, SCHEMA_VERSION};
pub use experiment::{Calibration, Experiment};
pub use results::{run_experiment, MethodResult, Results, RESULTS_FILE};
pub use stages::{
    generate_suite, job_seed, mixture, train_base, train_cluster_experts, train_expert, train_shared_expert,
    train_task_experts, TrainDiag,
};
pub use tasks::{reference_suite, Family, TaskDataset, TaskSpec};
