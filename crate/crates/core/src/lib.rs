//! Streaming binary speech emotion classification with a learned
//! wait/terminate policy.
//!
//! A GRU encodes feature frames into a running mean of its hidden states.
//! Three linear heads read that state: an angry/neutral classifier, a
//! two-action policy that decides when to stop listening, and a baseline
//! that estimates the episode return. The policy is trained with REINFORCE
//! on terminal rewards that combine correctness with a latency bonus.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod heads;
pub mod numerics;
pub mod rl;
pub mod trainer;

pub use error::{Error, Result};
