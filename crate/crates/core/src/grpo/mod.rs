//! Group-relative policy optimization kernel.

mod advantage;
mod engine;
mod eval;
mod objective;

pub use advantage::{group_statistics, normalize_advantages};
pub use engine::{
    run_training, Optimizer, StepMetrics, TrainConfig, Trainer, TrainingAbort, TrainingOutcome,
};
pub use eval::{evaluate, ClassReport, Decoding, EvalReport, MeanRewards};
pub use objective::{
    accumulate_grpo_gradient, batch_gradient, batch_objective, clip_surrogate,
    clip_surrogate_slope, grpo_gradient, grpo_objective, kl_term, KlMode, ObjectiveConfig, Rollout,
    RolloutGroup,
};

use thiserror::Error;

use crate::rewards::{JudgeError, RewardError};
use crate::toy_policy::PolicyError;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    #[error("invalid probability ratio {0}")]
    InvalidRatio(f64),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl GrpoError {
    pub fn is_judge_failure(&self) -> bool {
        matches!(self, GrpoError::Reward(RewardError::Judge(_)))
    }
}

impl From<JudgeError> for GrpoError {
    fn from(e: JudgeError) -> Self {
        GrpoError::Reward(RewardError::Judge(e))
    }
}
