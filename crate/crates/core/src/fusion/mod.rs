//! Cross-attention over the two branches, prediction heads, fusion and the
//! end-to-end model.

pub mod attention;
pub mod heads;
pub mod model;

pub use attention::{
    cross_attention, mhs_ca_branch, pool_spatial, pool_temporal, Branch, BranchContext, Hierarchy,
    HierarchyAttnParams, HierarchyQueries,
};
pub use heads::{bce_loss, fuse_predictions, heads, mse_loss, BranchPrediction, MlpParams, ModelOutput};
pub use model::{BranchToggles, HierarchyToggles, Model, ModelConfig, ModelObjective, PreparedSample, Target};
