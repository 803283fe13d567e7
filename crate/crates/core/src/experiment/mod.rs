//! Config-driven experiments: `collect → pretrain → train → eval → report`.
//!
//! Every command reads and writes files under `output_dir` and stamps them
//! with the config hash, so stale artifacts from a different configuration
//! are rejected rather than mixed.

mod commands;
mod config;
mod report;

pub use commands::{
    cmd_collect, cmd_eval, cmd_pretrain, cmd_report, cmd_train, load_policy, save_policy,
    CollectSummary, EvalResult, ExpertSummary, Job, Layout, PretrainSummary, Selection,
    TrainSummary,
};
pub use config::{
    DatasetConfig, DelayGrid, ExperimentConfig, ExpertConfig, RandomDelay, ReportConfig,
};
pub use report::{
    aggregate, k1_table_csv, normalized_return, records_csv, CurveSummary, Report, RunRecord,
};
