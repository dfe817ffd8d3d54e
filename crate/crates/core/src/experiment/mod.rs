//! Experiment configuration, Monte-Carlo sweeps and CSV output.

mod config;
mod sweep;

pub use config::{parse_methods, ExperimentConfig, GridCounts, Method, Profile, Sweep, SweepAxis};
pub use sweep::{
    diagnostics_path, point, run_sweep, trace_first, trial_data, write_result, write_rows, DiagRow, MetricRow, Point,
    SweepResult, TrialData,
};
