//! Configured training runs, multi-seed sweeps and their summaries.

mod aggregate;
mod config;
mod metrics;
mod runner;
mod suites;

pub use aggregate::{aggregate, mean_std, Aggregate, CurvePoint, RunMetrics, Stat, AGGREGATE_HEADER};
pub use config::{
    DataSource, DatasetSpec, ExperimentConfig, ModelSpec, OptimizerKind, OptimizerSpec,
    ScheduleSpec, SharpnessSpec, BLOBS_SPREAD, GLYPH_NOISE,
};
pub use metrics::{fmt_sig, metrics_csv, read_metrics, write_metrics, MetricsRecord, METRICS_HEADER};
pub use runner::{
    build_model, build_optimizer, build_schedule, data_for_model, prepare_data, run_id, run_training,
    run_training_on, PreparedData, RunResult,
};
pub use suites::{
    load_outcome, load_runs, plan, render_markdown, run_experiment, summary_rows, ExperimentKind,
    ExperimentOutcome, LoadedRun, SummaryRow, SweepOptions, HISTOGRAM_LAYER, SUMMARY_HEADER,
};
