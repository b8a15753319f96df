//! Experiment configuration, grid runs, sweeps and reports behind the `flatlab` binary.

pub mod config;
pub mod experiments;
pub mod grid;
pub mod report;
pub mod stats;

pub use config::{ArchSpec, DatasetSpec, ExperimentConfig, ExperimentKind, GridSpec, StressSpec, SweepSpec};
pub use grid::{grid_points, reparam_stress, run_grid, GridOutcome, ResultsTable, RunRecord, RunSpec, StressOutcome};
pub use stats::{correlate, correlations, increasing_trend_test, kendall, pearson, spearman, Correlation, TrendTest};
pub use experiments::{
    approx_representativeness_experiment, locally_constant_labels_experiment, ApproxOutcome, LclOutcome,
};
pub use report::{emit_report, ReportFormat, ALL_FORMATS};
