//! Core library for clipstop: a sequential-stopping reinforcement-learning
//! engine that learns, per study (a bag of view-labeled clip embeddings),
//! which clips to process and when to stop, trading classification accuracy
//! against a per-clip processing cost.
//!
//! Modules:
//! - [`data`]: study/clip records, dataset files, synthetic generation
//! - [`nn`]: dense networks, exact gradients, masked softmax, Adam
//! - [`nets`]: attention pooler, actor, critic, predictor, gradient routing
//! - [`env`]: the per-study decision process and vectorized stepping
//! - [`ppo`]: rollouts, advantage estimation, the clipped update, training
//! - [`eval`]: metrics, benchmark policies, reports and figure data
//! - [`ckpt`]: agent checkpoints

pub mod ckpt;
pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod nets;
pub mod nn;
pub mod pipeline;
pub mod ppo;
pub mod rng;

pub use error::{Error, Result};
