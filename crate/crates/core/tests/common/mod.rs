//! Helpers shared by integration tests: random groups and independent
//! reference computations.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use reflective_grpo::grpo::{KlMode, ObjectiveConfig, Rollout, RolloutGroup};
use reflective_grpo::rewards::RewardBreakdown;
use reflective_grpo::toy_policy::{Choices, ToyPolicy, NUM_HEADS};

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

pub fn random_policy(
    rng: &mut ChaCha8Rng,
    d: usize,
    sizes: [usize; NUM_HEADS],
    scale: f64,
    temperature: f64,
) -> ToyPolicy {
    ToyPolicy::zeros(d, sizes, temperature)
        .unwrap()
        .randomized(scale, rng)
}

pub fn perturbed(policy: &ToyPolicy, rng: &mut ChaCha8Rng, scale: f64) -> ToyPolicy {
    let mut p = policy.clone();
    for v in p.params_mut() {
        *v += rng.gen_range(-scale..scale);
    }
    p
}

pub fn rollout(choices: Choices, old_logprob: f64, overall: f64) -> Rollout {
    Rollout {
        raw: String::new(),
        trace: None,
        choices,
        old_logprob,
        reward: RewardBreakdown {
            overall,
            ..RewardBreakdown::malformed()
        },
    }
}

/// G rollouts sampled from `old` on random features, with uniform random rewards.
pub fn random_group(rng: &mut ChaCha8Rng, old: &ToyPolicy, g: usize) -> RolloutGroup {
    let features = random_features(rng, old.feature_dim());
    let rollouts = (0..g)
        .map(|_| {
            let c = old.sample_choices(&features, rng);
            let lp = old.log_prob(&features, &c).unwrap();
            rollout(c, lp, rng.gen_range(0.0..1.0))
        })
        .collect();
    RolloutGroup::new(0, features, rollouts, 1e-8).unwrap()
}

pub fn random_features(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Log-probability of `choices` computed straight from the flat parameter
/// layout: per head, K×d row-major weights then K biases.
pub fn naive_log_prob(policy: &ToyPolicy, x: &[f64], choices: &Choices) -> f64 {
    let p = policy.params();
    let d = policy.feature_dim();
    let t = policy.temperature();
    let mut offset = 0;
    let mut total = 0.0;
    for (head, &k) in policy.head_sizes().iter().enumerate() {
        let mut logits = vec![0.0; k];
        for (o, z) in logits.iter_mut().enumerate() {
            let mut s = p[offset + k * d + o];
            for j in 0..d {
                s += p[offset + o * d + j] * x[j];
            }
            *z = s / t;
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        total += logits[choices.as_array()[head]] - lse;
        offset += k * d + k;
    }
    total
}

/// The group objective written out term by term.
pub fn naive_objective(
    group: &RolloutGroup,
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    cfg: &ObjectiveConfig,
) -> f64 {
    assert_eq!(cfg.kl_mode, KlMode::Estimator);
    let g = group.rollouts.len() as f64;
    let mut total = 0.0;
    for (r, a) in group.rollouts.iter().zip(&group.advantages) {
        let lp = naive_log_prob(policy, &group.features, &r.choices);
        let ratio = (lp - r.old_logprob).exp();
        let clipped = ratio
            .max(1.0 - cfg.clip_epsilon)
            .min(1.0 + cfg.clip_epsilon);
        let surrogate = if ratio * a < clipped * a {
            ratio * a
        } else {
            clipped * a
        };
        let delta = naive_log_prob(reference, &group.features, &r.choices) - lp;
        total += surrogate - cfg.kl_beta * (delta.exp() - delta - 1.0);
    }
    total / g
}

/// Central finite differences of `f` around `policy`'s parameters.
pub fn finite_difference(policy: &ToyPolicy, h: f64, f: impl Fn(&ToyPolicy) -> f64) -> Vec<f64> {
    let mut p = policy.clone();
    (0..policy.num_params())
        .map(|i| {
            let v = p.params()[i];
            p.params_mut()[i] = v + h;
            let up = f(&p);
            p.params_mut()[i] = v - h;
            let down = f(&p);
            p.params_mut()[i] = v;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(numeric).max(1e-8)
}

/// Smallest distance of any rollout ratio from the clip edges `1 ± ε`.
pub fn clip_margin(group: &RolloutGroup, policy: &ToyPolicy, eps: f64) -> f64 {
    group
        .rollouts
        .iter()
        .map(|r| {
            let ratio =
                (policy.log_prob(&group.features, &r.choices).unwrap() - r.old_logprob).exp();
            (ratio - (1.0 - eps)).abs().min((ratio - (1.0 + eps)).abs())
        })
        .fold(f64::INFINITY, f64::min)
}
