//! Rollouts, return and advantage estimation, and policy-gradient updates.

pub mod curve;
pub mod ppo;
pub mod returns;
pub mod rollout;

pub use curve::{CurvePoint, LearningCurve};
pub use ppo::{
    advantages_and_targets, baseline_advantages, pg_gradient, ppo_loss, ppo_surrogate, ppo_update, trial_offsets, value_loss,
    vanilla_pg_update, DiagRow, Diagnostics, ModelOut, PgConfig, PolicyModel,
};
pub use returns::{discounted_returns, gae, normalize};
pub use rollout::{
    collect, collect_trials, evaluate, evaluate_tasks, run_trial, trials_for_frames, ActMode, ActOut, Episode,
    Policy, RolloutBatch, TaskSource, Trial,
};
