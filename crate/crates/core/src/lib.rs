//! Multimodal reinforcement learning on captioned trajectories.
//!
//! Visual features and caption encodings are fused early (concatenation) and
//! fed to DQN or PPO agents acting in a replayed-trajectory environment. The
//! crate also carries the caption-metric suite and the experiment harness.

pub mod agents;
pub mod dataset;
pub mod env;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod nncore;
pub mod textmetrics;

pub use error::{Error, Result};
