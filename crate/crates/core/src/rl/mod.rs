//! PPO on belief features, the joint objective, and the baseline agents.

mod agent;
mod gae;
mod ppo;
mod rollout;
mod seeds;
mod train;

use thiserror::Error;

use crate::belief::BeliefError;
use crate::corruption::CorruptionError;
use crate::dynamics::DynamicsError;
use crate::nn::NnError;

pub use agent::{
    diag_gaussian_log_prob, exception_imputation, fill_adjacent, Agent, AgentGrads, AgentKind,
    Estimate, Tracker, LOG_STD_MAX, LOG_STD_MIN,
};
pub use gae::gae;
pub use ppo::{
    normalize_advantages, ppo_policy_loss, ppo_policy_loss_from_log_probs, ppo_ratio_grad,
    ppo_term, value_loss, value_loss_grad,
};
pub use rollout::{run_episode, ActionMode, Episode, SegmentEnd};
pub use seeds::derive_seed;
pub use train::{
    evaluate, joint_objective, joint_step, prepare_batch, train, Batch, EvalSummary,
    GradClip, Hyperparams, IterationRecord, RunSpec, RunningStd, StepStats, TrainOutcome,
};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("{what}: expected length {expected}, found {found}")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Corruption(#[from] CorruptionError),
    #[error("step {step} of episode: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<RlError>,
    },
    #[error("non-finite {what} at iteration {iteration}: {value}")]
    NonFinite {
        what: &'static str,
        iteration: usize,
        value: f64,
    },
    #[error("training interrupted by observer: {0}")]
    Observer(String),
}

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), RlError> {
    if expected != found {
        return Err(RlError::Length {
            what,
            expected,
            found,
        });
    }
    Ok(())
}
