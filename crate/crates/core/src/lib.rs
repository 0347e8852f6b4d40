//! Budget-constrained routing between a reasoning and an instruct judge,
//! with KL-robust reweighting of the reward and cost terms.

pub mod data;
pub mod evalbench;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod policy;
pub mod reweight;
pub mod saddle;
pub mod trainer;

pub use data::{load_dataset, DataFormat, Dataset, Instance};
pub use error::{Error, Result};
pub use metrics::{evaluate_policy, evaluate_probs, EvalMode, Metrics};
pub use policy::{policy_prob, PolicySpec};
