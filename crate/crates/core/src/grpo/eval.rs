use serde::{Deserialize, Serialize};

use super::GrpoError;
use crate::rewards::{score_rollout, Judge, RewardWeights};
use crate::rng::{stream_rng, DOMAIN_EVAL};
use crate::synthetic_env::Environment;
use crate::toy_policy::ToyPolicy;
use crate::trace_grammar::{extract_answer, parse_trace, render_trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Decoding {
    Greedy,
    Sample { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub label: String,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanRewards {
    pub format: f64,
    pub accuracy: f64,
    pub consistency: f64,
    pub coherence: f64,
    pub rer: f64,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub taxonomy: String,
    pub decoding: Decoding,
    pub n: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassReport>,
    pub mean_rewards: MeanRewards,
}

/// Decodes one output per scene and reports answer accuracy overall and per
/// class, plus the mean reward breakdown.
pub fn evaluate(
    policy: &ToyPolicy,
    env: &Environment,
    judge: &dyn Judge,
    weights: &RewardWeights,
    decoding: Decoding,
) -> Result<EvalReport, GrpoError> {
    let tax = &env.taxonomy;
    let mut per_class: Vec<ClassReport> = tax
        .labels
        .iter()
        .map(|l| ClassReport {
            label: l.clone(),
            n: 0,
            correct: 0,
            accuracy: 0.0,
        })
        .collect();
    let mut sums = MeanRewards::default();
    let mut correct = 0;
    for (i, scene) in env.scenes.iter().enumerate() {
        let choices = match decoding {
            Decoding::Greedy => policy.greedy_choices(&scene.features),
            Decoding::Sample { seed } => policy.sample_choices(
                &scene.features,
                &mut stream_rng(seed, &[DOMAIN_EVAL, i as u64]),
            ),
        };
        let raw = render_trace(&env.bank.compose(tax, &choices))
            .map_err(|e| GrpoError::Config(e.to_string()))?;
        let r = score_rollout(
            &raw,
            &scene.scene_ref(&env.bank),
            &scene.gold_emotion,
            tax,
            weights,
            judge,
        )?;
        let hit = parse_trace(&raw)
            .ok()
            .and_then(|t| {
                tax.canonicalize(extract_answer(&t))
                    .map(|l| l == scene.gold_emotion)
            })
            .unwrap_or(false);
        let class = tax
            .index_of(&scene.gold_emotion)
            .ok_or_else(|| GrpoError::Config(format!("unknown label {:?}", scene.gold_emotion)))?;
        per_class[class].n += 1;
        if hit {
            per_class[class].correct += 1;
            correct += 1;
        }
        sums.format += r.format;
        sums.accuracy += r.accuracy;
        sums.consistency += r.consistency;
        sums.coherence += r.coherence;
        sums.rer += r.rer;
        sums.overall += r.overall;
    }
    let n = env.scenes.len();
    for c in &mut per_class {
        c.accuracy = if c.n > 0 {
            c.correct as f64 / c.n as f64
        } else {
            0.0
        };
    }
    let scale = if n > 0 { 1.0 / n as f64 } else { 0.0 };
    Ok(EvalReport {
        taxonomy: tax.name.clone(),
        decoding,
        n,
        accuracy: correct as f64 * scale,
        per_class,
        mean_rewards: MeanRewards {
            format: sums.format * scale,
            accuracy: sums.accuracy * scale,
            consistency: sums.consistency * scale,
            coherence: sums.coherence * scale,
            rer: sums.rer * scale,
            overall: sums.overall * scale,
        },
    })
}
