//! Belief-space reinforcement learning under corrupted observations.

pub mod belief;
pub mod corruption;
pub mod dynamics;
pub mod env;
pub mod linalg;
pub mod nn;
pub mod rl;
pub mod harness;
pub mod oracle;
pub mod selftest;
