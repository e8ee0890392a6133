//! Experiment workflow: demonstrations, imitation, improvement, evaluation.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod model_io;
pub mod stats;

pub use commands::*;
pub use config::{ExperimentConfig, ModelConfig, RlConfig};
pub use dataset::{read_dataset, write_dataset, DemoRecord};
pub use model_io::{ModelFile, PolicyRecord, FORMAT_VERSION};
pub use stats::{clopper_pearson, BinomialInterval};
