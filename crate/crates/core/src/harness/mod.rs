//! Data formats, fixture generation, training, checkpointing and evaluation.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod fixtures;
pub mod tensor;
pub mod suites;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use dataset::{load_annotations, Dataset, DatasetMeta, SampleRecord};
pub use eval::{evaluate, EvalReport};
pub use fixtures::{generate_fixtures, generate_samples, FixtureConfig};
pub use train::{train, StepRecord, TrainRun};
