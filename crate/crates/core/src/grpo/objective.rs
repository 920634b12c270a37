//! Clipped group-relative surrogate with a KL anchor, and its exact gradient.
//!
//! For one group of G outputs sampled from the old policy:
//!
//! ```text
//! J(θ) = 1/G Σᵢ min(ρᵢ Âᵢ, clip(ρᵢ, 1-ε, 1+ε) Âᵢ) - β · KL
//! ρᵢ   = exp(log πθ(oᵢ) - log πold(oᵢ))
//! ```
//!
//! Log-probabilities are whole-output (sum over the four heads). KL is either
//! the per-sample estimator `exp(Δ) - Δ - 1` with `Δ = log πref - log πθ`,
//! averaged over the group, or the exact KL of the factored policy.

use serde::{Deserialize, Serialize};

use super::advantage::{group_statistics, normalize_advantages};
use super::GrpoError;
use crate::rewards::RewardBreakdown;
use crate::toy_policy::{Choices, ToyPolicy};
use crate::trace_grammar::StructuredTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlMode {
    #[default]
    Estimator,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub group_size: usize,
    pub std_floor: f64,
    #[serde(default)]
    pub kl_mode: KlMode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            kl_beta: 0.01,
            group_size: 8,
            std_floor: 1e-8,
            kl_mode: KlMode::Estimator,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon.is_finite()) {
            return Err(GrpoError::Config(format!(
                "clip_epsilon {} must be > 0",
                self.clip_epsilon
            )));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return Err(GrpoError::Config(format!(
                "kl_beta {} must be >= 0",
                self.kl_beta
            )));
        }
        if self.group_size < 2 {
            return Err(GrpoError::Config(format!(
                "group_size {} must be >= 2",
                self.group_size
            )));
        }
        if !(self.std_floor > 0.0) {
            return Err(GrpoError::Config(format!(
                "std_floor {} must be > 0",
                self.std_floor
            )));
        }
        Ok(())
    }
}

pub fn clip_surrogate(ratio: f64, advantage: f64, clip_epsilon: f64) -> Result<f64, GrpoError> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(GrpoError::InvalidRatio(ratio));
    }
    let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
    Ok((ratio * advantage).min(clipped * advantage))
}

/// d/dratio of [`clip_surrogate`]; zero wherever the clipped branch is the
/// active minimum.
pub fn clip_surrogate_slope(ratio: f64, advantage: f64, clip_epsilon: f64) -> f64 {
    if (advantage > 0.0 && ratio > 1.0 + clip_epsilon)
        || (advantage < 0.0 && ratio < 1.0 - clip_epsilon)
    {
        0.0
    } else {
        advantage
    }
}

/// `exp(Δ) - Δ - 1` with `Δ = ref_logprob - policy_logprob`.
pub fn kl_term(policy_logprob: f64, ref_logprob: f64) -> Result<f64, GrpoError> {
    if !policy_logprob.is_finite() || !ref_logprob.is_finite() {
        return Err(GrpoError::Numeric(format!(
            "non-finite log-probabilities ({policy_logprob}, {ref_logprob})"
        )));
    }
    let delta = ref_logprob - policy_logprob;
    // exp_m1 keeps the small-Δ regime accurate and non-negative
    Ok((delta.exp_m1() - delta).max(0.0))
}

/// One sampled output with its sampling-time log-probability and rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub raw: String,
    pub trace: Option<StructuredTrace>,
    pub choices: Choices,
    pub old_logprob: f64,
    pub reward: RewardBreakdown,
}

/// G outputs for one prompt with group statistics and advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub prompt_id: usize,
    pub features: Vec<f64>,
    pub rollouts: Vec<Rollout>,
    pub overall: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(
        prompt_id: usize,
        features: Vec<f64>,
        rollouts: Vec<Rollout>,
        std_floor: f64,
    ) -> Result<Self, GrpoError> {
        let overall: Vec<f64> = rollouts.iter().map(|r| r.reward.overall).collect();
        let (mean, std) = group_statistics(&overall)?;
        let advantages = normalize_advantages(&overall, std_floor)?;
        Ok(Self {
            prompt_id,
            features,
            rollouts,
            overall,
            mean,
            std,
            advantages,
        })
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    fn check(&self, config: &ObjectiveConfig) -> Result<(), GrpoError> {
        config.validate()?;
        let g = self.rollouts.len();
        if g != config.group_size || self.advantages.len() != g || self.overall.len() != g {
            return Err(GrpoError::InvalidGroup(format!(
                "group of {g} rollouts / {} advantages does not match group_size {}",
                self.advantages.len(),
                config.group_size
            )));
        }
        Ok(())
    }
}

/// Per-group objective value.
pub fn grpo_objective(
    group: &RolloutGroup,
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    config: &ObjectiveConfig,
) -> Result<f64, GrpoError> {
    group.check(config)?;
    let g = group.len() as f64;
    let mut surrogate = 0.0;
    let mut kl = 0.0;
    for (r, &adv) in group.rollouts.iter().zip(&group.advantages) {
        let lp = policy.log_prob(&group.features, &r.choices)?;
        surrogate += clip_surrogate((lp - r.old_logprob).exp(), adv, config.clip_epsilon)?;
        if config.kl_mode == KlMode::Estimator {
            kl += kl_term(lp, reference.log_prob(&group.features, &r.choices)?)?;
        }
    }
    let kl = match config.kl_mode {
        KlMode::Estimator => kl / g,
        KlMode::Exact => policy.exact_kl(reference, &group.features),
    };
    Ok(surrogate / g - config.kl_beta * kl)
}

/// Adds `scale · ∇θ J(θ)` for one group into `out`.
pub fn accumulate_grpo_gradient(
    group: &RolloutGroup,
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    config: &ObjectiveConfig,
    scale: f64,
    out: &mut [f64],
) -> Result<(), GrpoError> {
    group.check(config)?;
    if out.len() != policy.num_params() {
        return Err(GrpoError::Config(
            "gradient buffer has the wrong length".into(),
        ));
    }
    let w = scale / group.len() as f64;
    for (r, &adv) in group.rollouts.iter().zip(&group.advantages) {
        let lp = policy.log_prob(&group.features, &r.choices)?;
        let ratio = (lp - r.old_logprob).exp();
        if !(ratio > 0.0 && ratio.is_finite()) {
            return Err(GrpoError::InvalidRatio(ratio));
        }
        // d ratio / dθ = ratio · ∇ log πθ
        let mut coeff = clip_surrogate_slope(ratio, adv, config.clip_epsilon) * ratio;
        if config.kl_mode == KlMode::Estimator && config.kl_beta != 0.0 {
            let ref_lp = reference.log_prob(&group.features, &r.choices)?;
            // d/dθ [exp(ref - lp) - (ref - lp) - 1] = (1 - exp(ref - lp)) ∇ lp
            coeff -= config.kl_beta * (1.0 - (ref_lp - lp).exp());
        }
        if coeff != 0.0 {
            policy.accumulate_log_prob_gradient(&group.features, &r.choices, w * coeff, out);
        }
    }
    if config.kl_mode == KlMode::Exact && config.kl_beta != 0.0 {
        policy.accumulate_exact_kl_gradient(
            reference,
            &group.features,
            -scale * config.kl_beta,
            out,
        );
    }
    Ok(())
}

pub fn grpo_gradient(
    group: &RolloutGroup,
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    config: &ObjectiveConfig,
) -> Result<Vec<f64>, GrpoError> {
    let mut out = vec![0.0; policy.num_params()];
    accumulate_grpo_gradient(group, policy, reference, config, 1.0, &mut out)?;
    Ok(out)
}

/// Mean of the per-group objectives.
pub fn batch_objective(
    groups: &[RolloutGroup],
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    config: &ObjectiveConfig,
) -> Result<f64, GrpoError> {
    if groups.is_empty() {
        return Err(GrpoError::InvalidGroup("empty batch".into()));
    }
    let mut total = 0.0;
    for g in groups {
        total += grpo_objective(g, policy, reference, config)?;
    }
    Ok(total / groups.len() as f64)
}

pub fn batch_gradient(
    groups: &[RolloutGroup],
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    config: &ObjectiveConfig,
) -> Result<Vec<f64>, GrpoError> {
    if groups.is_empty() {
        return Err(GrpoError::InvalidGroup("empty batch".into()));
    }
    let mut out = vec![0.0; policy.num_params()];
    let scale = 1.0 / groups.len() as f64;
    for g in groups {
        accumulate_grpo_gradient(g, policy, reference, config, scale, &mut out)?;
    }
    Ok(out)
}
