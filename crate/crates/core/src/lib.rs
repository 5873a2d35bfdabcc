//! Referring atomic action recognition at desk scale: nearest-token semantic
//! retrieval, state-space trajectory aggregation, multi-hierarchy
//! cross-attention and box/action heads, trainable on synthetic fixtures.

pub mod error;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod retrieval;
pub mod semantics;
pub mod ssm;

pub use error::{Error, Result, Stage};
pub use fusion::{Model, ModelConfig, ModelOutput};
pub use numerics::{DenseMatrix, ParamStore};
