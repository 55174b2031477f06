//! Benchmark scenarios, baselines, metrics and the Monte-Carlo driver.

pub mod baselines;
pub mod experiment;
pub mod metrics;
pub mod scenario;

pub use baselines::{baseline_complete_case, baseline_mean_impute, baseline_svd_impute};
pub use experiment::{run_experiment, ExperimentConfig, ResultRow};
pub use metrics::{evaluate, MetricsReport};
pub use scenario::{gen_scenario, ScenarioData, ScenarioId, ScenarioSpec, TrueModel};
