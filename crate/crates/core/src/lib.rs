//! Expectation-alignment intrinsic rewards for decentralized multi-agent
//! reinforcement learning on particle-world tasks.

pub mod dynamics;
pub mod error;
pub mod intrinsic;
pub mod nn;
pub mod sac;
pub mod tasks;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
