//! Iterative policy initialization for reinforcement learning with
//! verifiable rewards: alternating RL exploration, rejection-sampling
//! fine-tuning from the iteration's starting policy, and re-initialization,
//! together with learning/forgetting, similarity, pass@k, entropy and
//! gradient-norm diagnostics.

pub mod analysis;
pub mod checkpoint;
pub mod error;
pub mod experiment;
mod par;
pub mod orchestrator;
pub mod policy;
pub mod rft;
pub mod rl;
pub mod seed;
pub mod store;
pub mod taskgen;
pub mod warmup;

pub use error::{Error, Result};
