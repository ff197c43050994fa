//! Datasets, experiment configuration and the staged pipeline.

mod config;
mod data;
mod pipeline;

pub use config::{parse_alpha, parse_mode, ExperimentConfig, CONFIG_VERSION, ENV_PREFIX};
pub use data::{generate_synthetic, DatasetFile, Split, SynthSpec};
pub use pipeline::{run_pipeline, Condition, RunReport, Stage, StageOutcome};
