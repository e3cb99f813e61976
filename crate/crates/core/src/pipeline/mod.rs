//! End-to-end orchestration: strategies, artifacts, reports and serving.

mod artifact;
mod config;
mod experiment;
mod report;
mod serve;

pub use artifact::{
    load_artifact, save_artifact, ArtifactManifest, ParamEntry, ARTIFACT_FORMAT_VERSION,
};
pub use config::{load_config, parse_config, ExperimentConfig, ServeConfig, Strategy};
pub use experiment::{
    evaluate_row, init_meta, initial_indices, light_genotype_budget, prepare_scenarios,
    run_experiment, train_meta_light, train_searched_light, train_single_heavy,
};
pub use report::{averages, Failure, ReportRow, StrategyAverage, StrategyReport};
pub use serve::{percentile, request_batch, serve_batch, LatencyStats};
