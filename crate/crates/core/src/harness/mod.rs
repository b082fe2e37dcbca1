//! Synthetic data, training, evaluation and the staged pipeline.

pub mod data;
pub mod eval;
pub mod pipeline;
pub mod report;
pub mod train;

pub use data::SyntheticDataset;
pub use eval::{evaluate, MetricsReport};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineOutcome, Stage};
pub use train::{train, TrainOptions, TrainReport};
