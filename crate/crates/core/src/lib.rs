//! Desk-scale meta-reinforcement learning with out-of-distribution
//! consistency metrics.
//!
//! The crate is organised bottom-up:
//!
//! - [`env`]: seedable point-mass task families and their goal spaces.
//! - [`diffnet`]: parameter containers, a reverse-mode tape, MLP/GRU layers
//!   and the Gaussian policy head.
//! - [`pg`]: rollouts, returns/advantages, PPO and vanilla policy gradient.
//! - [`meta`]: MAML (first order), RL² and VariBAD agents and their
//!   meta-training loops.
//! - [`adaptation`]: default, gradient-adaptation, continued meta-training and
//!   from-scratch protocols, each producing a learning curve.
//! - [`metrics`]: consistency score and rate, grid reports and heatmaps.
//! - [`harness`]: configs, checkpoints, seed derivation and grid execution.

pub mod adaptation;
pub mod diffnet;
pub mod env;
pub mod gradcheck;
pub mod error;
pub mod harness;
pub mod meta;
pub mod metrics;
pub mod par;
pub mod pg;
pub mod seed;

pub use error::{Error, Result};
