//! Inverse rational control for a two-box foraging task.
//!
//! The crate simulates a softmax-rational agent that plans over a discretized
//! belief space with possibly wrong assumptions about the world, and recovers
//! those assumptions (plus subjective costs and latent belief trajectories)
//! from logged observations and actions with expectation-maximization.

pub mod agent_sim;
pub mod belief_space;
pub mod commands;
pub mod config;
pub mod error;
pub mod estimator;
pub mod io;
pub mod linalg;
pub mod params;
pub mod planner;
pub mod policy_gradient;
pub mod task_env;

pub use error::{IrcError, Result};
