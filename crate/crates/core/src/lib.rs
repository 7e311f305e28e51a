//! Goal-conditioned hierarchical reinforcement learning with model-based
//! rollout guidance (adjacency-constrained landmark planning plus
//! rollout-based relabeling, gradient penalty and one-step planning) on a
//! deterministic point-mass maze.

pub mod adjacency;
pub mod approx;
pub mod correction;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod gcmr;
pub mod harness;
pub mod hierarchy;
pub mod landmark;
pub mod td3;

pub use error::{Error, Result};
