//! Training step and training loop.
//!
//! Each step refreshes the old policy to the current parameters, samples G
//! outputs per prompt from it, scores them, normalizes rewards within each
//! group and takes one gradient-ascent step on the batch objective. The
//! reference policy is frozen when training starts.

use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use super::objective::{
    batch_gradient, batch_objective, kl_term, ObjectiveConfig, Rollout, RolloutGroup,
};
use super::GrpoError;
use crate::rewards::{score_rollout, Judge, RewardWeights, SceneRef};
use crate::rng::{stream_rng, DOMAIN_BATCH, DOMAIN_ROLLOUT};
use crate::synthetic_env::Environment;
use crate::toy_policy::{PolicySnapshot, ToyPolicy};
use crate::trace_grammar::parse_trace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub weights: RewardWeights,
    pub learning_rate: f64,
    pub steps: usize,
    /// Prompts per step; the whole dataset when it is at least this large.
    pub batch_size: usize,
    pub seed: u64,
    /// Worker threads for sampling and scoring. Results do not depend on it.
    pub workers: usize,
    /// Record measured wall time per step; otherwise `wall_ms` is 0 so that
    /// metrics are reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveConfig::default(),
            weights: RewardWeights::default(),
            learning_rate: 0.05,
            steps: 500,
            batch_size: 16,
            seed: 7,
            workers: 1,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        self.objective.validate()?;
        self.weights.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(GrpoError::Config(format!(
                "learning_rate {} must be >= 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(GrpoError::Config("batch_size must be positive".into()));
        }
        if self.workers == 0 {
            return Err(GrpoError::Config("workers must be positive".into()));
        }
        Ok(())
    }
}

/// Plain gradient ascent with a fixed step size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub learning_rate: f64,
    pub updates: u64,
}

impl Optimizer {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            updates: 0,
        }
    }

    pub fn apply(&mut self, policy: &mut ToyPolicy, gradient: &[f64]) {
        for (p, g) in policy.params_mut().iter_mut().zip(gradient) {
            *p += self.learning_rate * g;
        }
        self.updates += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_overall: f64,
    pub mean_acc: f64,
    pub mean_format: f64,
    pub mean_cons: f64,
    pub mean_coh: f64,
    /// KL estimator against the reference, averaged over the step's rollouts.
    pub mean_kl: f64,
    /// Batch objective after the update.
    pub objective: f64,
    pub wall_ms: u64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str =
        "step,mean_overall,mean_acc,mean_format,mean_cons,mean_coh,mean_kl,objective,wall_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.mean_overall,
            self.mean_acc,
            self.mean_format,
            self.mean_cons,
            self.mean_coh,
            self.mean_kl,
            self.objective,
            self.wall_ms
        )
    }
}

/// Owns everything a training step needs besides the live policy.
pub struct Trainer<'a> {
    env: &'a Environment,
    judge: &'a dyn Judge,
    config: TrainConfig,
    reference: PolicySnapshot,
    optimizer: Optimizer,
    scene_refs: Vec<SceneRef>,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: TrainConfig,
        env: &'a Environment,
        judge: &'a dyn Judge,
        reference: PolicySnapshot,
    ) -> Result<Self, GrpoError> {
        config.validate()?;
        if env.scenes.is_empty() {
            return Err(GrpoError::Config("dataset is empty".into()));
        }
        if reference.feature_dim() != env.feature_dim() {
            return Err(GrpoError::Config(format!(
                "policy expects {} features, scenes have {}",
                reference.feature_dim(),
                env.feature_dim()
            )));
        }
        if reference.head_sizes() != env.bank.head_sizes(&env.taxonomy) {
            return Err(GrpoError::Config(
                "policy heads do not match the clause bank".into(),
            ));
        }
        let pool = if config.workers > 1 && judge.is_concurrent() {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.workers)
                    .build()
                    .map_err(|e| GrpoError::Config(e.to_string()))?,
            )
        } else {
            None
        };
        let scene_refs = env.scenes.iter().map(|s| s.scene_ref(&env.bank)).collect();
        Ok(Self {
            env,
            judge,
            optimizer: Optimizer::new(config.learning_rate),
            config,
            reference,
            scene_refs,
            pool,
        })
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn reference(&self) -> &PolicySnapshot {
        &self.reference
    }

    /// Scene indices used at `step`.
    pub fn batch_for_step(&self, step: usize) -> Vec<usize> {
        let n = self.env.scenes.len();
        if self.config.batch_size >= n {
            return (0..n).collect();
        }
        let mut rng = stream_rng(self.config.seed, &[DOMAIN_BATCH, step as u64]);
        let mut idx = sample_indices(&mut rng, n, self.config.batch_size).into_vec();
        idx.sort_unstable();
        idx
    }

    fn rollout(
        &self,
        step: usize,
        scene_idx: usize,
        i: usize,
        old: &ToyPolicy,
    ) -> Result<Rollout, GrpoError> {
        let scene = &self.env.scenes[scene_idx];
        let mut rng = stream_rng(
            self.config.seed,
            &[DOMAIN_ROLLOUT, step as u64, scene_idx as u64, i as u64],
        );
        let out = old.sample_output(
            &scene.features,
            &self.env.bank,
            &self.env.taxonomy,
            &mut rng,
        )?;
        let reward = score_rollout(
            &out.raw,
            &self.scene_refs[scene_idx],
            &scene.gold_emotion,
            &self.env.taxonomy,
            &self.config.weights,
            self.judge,
        )?;
        Ok(Rollout {
            trace: parse_trace(&out.raw).ok(),
            raw: out.raw,
            choices: out.choices,
            old_logprob: out.logprob,
            reward,
        })
    }

    /// Samples and scores every rollout of the batch, in a fixed order.
    pub fn collect_groups(
        &self,
        step: usize,
        batch: &[usize],
        old: &ToyPolicy,
    ) -> Result<Vec<RolloutGroup>, GrpoError> {
        let g = self.config.objective.group_size;
        let jobs: Vec<(usize, usize)> = batch
            .iter()
            .flat_map(|&s| (0..g).map(move |i| (s, i)))
            .collect();
        let results: Vec<Result<Rollout, GrpoError>> = match &self.pool {
            Some(pool) => {
                use rayon::prelude::*;
                pool.install(|| {
                    jobs.par_iter()
                        .map(|&(s, i)| self.rollout(step, s, i, old))
                        .collect()
                })
            }
            None => jobs
                .iter()
                .map(|&(s, i)| self.rollout(step, s, i, old))
                .collect(),
        };
        let rollouts = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        let mut it = rollouts.into_iter();
        batch
            .iter()
            .map(|&s| {
                let group: Vec<Rollout> = it.by_ref().take(g).collect();
                RolloutGroup::new(
                    s,
                    self.env.scenes[s].features.clone(),
                    group,
                    self.config.objective.std_floor,
                )
            })
            .collect()
    }

    /// One update. On error the policy and optimizer are left untouched.
    pub fn training_step(
        &mut self,
        step: usize,
        batch: &[usize],
        policy: &mut ToyPolicy,
        old: &PolicySnapshot,
    ) -> Result<StepMetrics, GrpoError> {
        let started = Instant::now();
        if batch.is_empty() || batch.iter().any(|&s| s >= self.env.scenes.len()) {
            return Err(GrpoError::Config("batch references unknown scenes".into()));
        }
        let groups = self.collect_groups(step, batch, old)?;
        let cfg = self.config.objective;
        let gradient = batch_gradient(&groups, policy, &self.reference, &cfg)?;
        if gradient.iter().any(|g| !g.is_finite()) {
            return Err(GrpoError::Numeric("non-finite gradient".into()));
        }

        let mut sums = [0.0f64; 6];
        let mut count = 0.0;
        for group in &groups {
            for r in &group.rollouts {
                let ref_lp = self.reference.log_prob(&group.features, &r.choices)?;
                let kl = kl_term(r.old_logprob, ref_lp)?;
                let b = &r.reward;
                for (s, v) in sums.iter_mut().zip([
                    b.overall,
                    b.accuracy,
                    b.format,
                    b.consistency,
                    b.coherence,
                    kl,
                ]) {
                    *s += v;
                }
                count += 1.0;
            }
        }

        let mut updated = policy.clone();
        let mut optimizer = self.optimizer.clone();
        optimizer.apply(&mut updated, &gradient);
        let objective = batch_objective(&groups, &updated, &self.reference, &cfg)?;
        if !updated.is_finite() {
            return Err(GrpoError::Numeric(
                "update produced non-finite parameters".into(),
            ));
        }
        *policy = updated;
        self.optimizer = optimizer;

        Ok(StepMetrics {
            step,
            mean_overall: sums[0] / count,
            mean_acc: sums[1] / count,
            mean_format: sums[2] / count,
            mean_cons: sums[3] / count,
            mean_coh: sums[4] / count,
            mean_kl: sums[5] / count,
            objective,
            wall_ms: if self.config.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub policy: ToyPolicy,
    pub metrics: Vec<StepMetrics>,
}

/// A failed run: the error, the metrics emitted before it, and the policy as
/// of the last completed step.
#[derive(Debug)]
pub struct TrainingAbort {
    pub error: GrpoError,
    pub metrics: Vec<StepMetrics>,
    pub policy: ToyPolicy,
}

impl std::fmt::Display for TrainingAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "training aborted after {} step(s): {}",
            self.metrics.len(),
            self.error
        )
    }
}

impl std::error::Error for TrainingAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Runs `config.steps` steps from `initial`, passing each step's metrics to
/// `sink` as soon as it completes.
pub fn run_training(
    config: &TrainConfig,
    env: &Environment,
    judge: &dyn Judge,
    initial: &ToyPolicy,
    sink: &mut dyn FnMut(&StepMetrics) -> std::io::Result<()>,
) -> Result<TrainingOutcome, TrainingAbort> {
    let mut policy = initial.clone();
    let mut metrics = Vec::with_capacity(config.steps);
    let abort = |error: GrpoError, metrics: Vec<StepMetrics>, policy: ToyPolicy| TrainingAbort {
        error,
        metrics,
        policy,
    };

    let mut trainer = match Trainer::new(*config, env, judge, initial.snapshot()) {
        Ok(t) => t,
        Err(e) => return Err(abort(e, metrics, policy)),
    };
    for step in 0..config.steps {
        let old = policy.snapshot();
        let batch = trainer.batch_for_step(step);
        match trainer.training_step(step, &batch, &mut policy, &old) {
            Ok(m) => {
                if let Err(e) = sink(&m) {
                    return Err(abort(GrpoError::Io(e), metrics, policy));
                }
                metrics.push(m);
            }
            Err(e) => return Err(abort(e, metrics, policy)),
        }
    }
    Ok(TrainingOutcome { policy, metrics })
}
