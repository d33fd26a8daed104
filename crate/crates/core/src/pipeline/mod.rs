//! Experiment orchestration: configuration, synthetic data, runs and
//! reports.

pub mod config;
pub mod counterfactual;
pub mod report;
pub mod run;
pub mod synth;

pub use config::{
    Approach, DataConfig, DistillSettings, ExperimentConfig, GoalSource, LlmBackendConfig, LlmSettings,
    LocalModelConfig, MockBehavior, Precision, SyntheticData,
};
pub use counterfactual::{
    counterfactual_prompts, goal_keyed_responder, hamming_divergence, run_counterfactual, CounterfactualRecord,
    CounterfactualReport, CounterfactualSettings,
};
pub use report::{collect_rows, find_runs, load_report, render_table, ReportRow};
pub use run::{
    alternative_goal, build_client, evaluate_instances, goal_jobs, infer_goals, load_dataset, predict_local, recognize,
    rerun_from_manifest, resolve_backend, run_counterfactual_experiment, run_experiment, run_jobs, run_on_dataset,
    student_subset, train_local, Dataset, LlmJob, LocalModel, Manifest, OracleAnswer, RunOutput, RunReport,
};
pub use synth::{apply_label_noise, generate_synthetic, GoalCycle, SyntheticCorpus, SyntheticGrammar};
