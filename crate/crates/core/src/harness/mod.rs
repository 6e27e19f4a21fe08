//! Experiment orchestration: config, the distillation pipeline, sweeps and reports.

pub mod config;
pub mod experiments;
pub mod pipeline;
pub mod report;

pub use config::{load_dataset_spec, ExperimentConfig};
pub use experiments::{
    demo_gap, noise_ablation, snr_command, summarize, sweep, tree_experiment, AblationReport,
    AblationRow, BestLambda, DemoGapReport, LambdaSummary, RunRow, SweepReport, TimingRow,
    TreeReport, TreeRow, TreeSummary,
};
pub use pipeline::{run_pipeline, run_pipeline_noisy, run_tree_pipeline, PipelineOutcome, TeacherStage};
pub use report::Metadata;
