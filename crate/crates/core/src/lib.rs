//! Multi-task behavioral priors for an over-actuated, muscle-driven planar arm.
//!
//! The crate bundles a small musculoskeletal plant with a grasp latch, a
//! parametric suite of object-trajectory tasks, a goal-conditioned MDP, an
//! MLP/PPO stack written from scratch, the expert / prior / fine-tune /
//! distillation workflows, and NNMF-based muscle-synergy analysis.

pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod nn;
pub mod plant;
pub mod ppo;
pub mod synergy;
pub mod tasks;
pub mod workflows;

pub use error::{Error, Result};
