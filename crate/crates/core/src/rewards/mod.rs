//! Scalar rewards for one rollout and their weighted combination.
//!
//! Format and accuracy are read off the parsed trace. Consistency and
//! coherence come from a [`Judge`] answering the two reflective prompts. The
//! reflective reward averages those two, and the overall reward mixes
//! accuracy, reflective and format rewards with weights `λ₁`, `λ₂`:
//!
//! ```text
//! rer     = (consistency + coherence) / 2
//! overall = (1 - λ₁ - λ₂)·accuracy + λ₁·rer + λ₂·format
//! ```

mod judge;
mod taxonomy;

pub use judge::{
    judge_emotion, judge_yes_no, normalize_emotion, normalize_yes_no, EmotionVerdict, Judge,
    JudgeError, SceneRef, Verdict, COHERENCE_PROMPT, CONSISTENCY_PROMPT,
};
pub use taxonomy::{normalize_label, Affect, Arousal, EmotionTaxonomy, Valence};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace_grammar::{self, StructuredTrace};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("reward configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Judge(#[from] JudgeError),
}

/// Mixing weights `λ₁` (reflective reward) and `λ₂` (format reward).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
        }
    }
}

impl RewardWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self, RewardError> {
        let w = Self { lambda1, lambda2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(RewardError::Config(format!("{name}={v} outside [0, 1]")));
            }
        }
        if self.lambda1 + self.lambda2 > 1.0 {
            return Err(RewardError::Config(format!(
                "lambda1 + lambda2 = {} exceeds 1",
                self.lambda1 + self.lambda2
            )));
        }
        Ok(())
    }

    pub fn accuracy_weight(&self) -> f64 {
        1.0 - self.lambda1 - self.lambda2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    pub accuracy: f64,
    pub consistency: f64,
    pub coherence: f64,
    pub rer: f64,
    pub overall: f64,
}

impl RewardBreakdown {
    /// All zeros: the breakdown of an output that does not parse.
    pub fn malformed() -> Self {
        Self::default()
    }

    /// Builds a breakdown from the four binary components.
    pub fn from_components(
        format: f64,
        accuracy: f64,
        consistency: f64,
        coherence: f64,
        weights: &RewardWeights,
    ) -> Result<Self, RewardError> {
        let mut b = Self {
            format,
            accuracy,
            consistency,
            coherence,
            rer: reward_rer(consistency, coherence),
            overall: 0.0,
        };
        b.overall = reward_overall(&b, weights)?;
        Ok(b)
    }
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

pub fn reward_format(raw_output: &str) -> f64 {
    indicator(trace_grammar::check_format(raw_output))
}

pub fn reward_accuracy(
    predicted: &str,
    gold: &str,
    taxonomy: &EmotionTaxonomy,
) -> Result<f64, RewardError> {
    if !taxonomy.contains(gold) {
        return Err(RewardError::Config(format!(
            "gold label {gold:?} is not in taxonomy {}",
            taxonomy.name
        )));
    }
    Ok(indicator(taxonomy.canonicalize(predicted) == Some(gold)))
}

pub fn reward_consistency(verdict: Verdict) -> f64 {
    indicator(verdict == Verdict::Yes)
}

pub fn reward_coherence(
    judged: &EmotionVerdict,
    gold: &str,
    taxonomy: &EmotionTaxonomy,
) -> Result<f64, RewardError> {
    match judged {
        EmotionVerdict::Label(l) => reward_accuracy(l, gold, taxonomy),
        EmotionVerdict::Unmatched(_) => {
            if taxonomy.contains(gold) {
                Ok(0.0)
            } else {
                Err(RewardError::Config(format!(
                    "gold label {gold:?} not in taxonomy"
                )))
            }
        }
    }
}

pub fn reward_rer(consistency: f64, coherence: f64) -> f64 {
    (consistency + coherence) / 2.0
}

pub fn reward_overall(b: &RewardBreakdown, weights: &RewardWeights) -> Result<f64, RewardError> {
    weights.validate()?;
    Ok(weights.accuracy_weight() * b.accuracy
        + weights.lambda1 * b.rer
        + weights.lambda2 * b.format)
}

/// Scores an already-parsed trace (format is 1 by construction).
pub fn score_trace(
    trace: &StructuredTrace,
    scene: &SceneRef,
    gold: &str,
    taxonomy: &EmotionTaxonomy,
    weights: &RewardWeights,
    judge: &dyn Judge,
) -> Result<RewardBreakdown, RewardError> {
    let accuracy = reward_accuracy(trace_grammar::extract_answer(trace), gold, taxonomy)?;
    let verdict = judge_yes_no(
        judge,
        scene,
        trace_grammar::extract_step1(trace),
        CONSISTENCY_PROMPT,
    )?;
    let judged = judge_emotion(
        judge,
        &trace_grammar::extract_steps12(trace),
        COHERENCE_PROMPT,
        taxonomy,
    )?;
    RewardBreakdown::from_components(
        1.0,
        accuracy,
        reward_consistency(verdict),
        reward_coherence(&judged, gold, taxonomy)?,
        weights,
    )
}

/// Full reward pipeline for one raw output. A parse failure zeroes every
/// component and the judge is not consulted.
pub fn score_rollout(
    raw_output: &str,
    scene: &SceneRef,
    gold: &str,
    taxonomy: &EmotionTaxonomy,
    weights: &RewardWeights,
    judge: &dyn Judge,
) -> Result<RewardBreakdown, RewardError> {
    weights.validate()?;
    if !taxonomy.contains(gold) {
        return Err(RewardError::Config(format!(
            "gold label {gold:?} is not in taxonomy {}",
            taxonomy.name
        )));
    }
    match trace_grammar::parse_trace(raw_output) {
        Ok(trace) => score_trace(&trace, scene, gold, taxonomy, weights, judge),
        Err(_) => Ok(RewardBreakdown::malformed()),
    }
}
