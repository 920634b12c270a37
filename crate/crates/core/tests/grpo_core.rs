mod common;

use std::sync::atomic::{AtomicUsize, Ordering};

use common::*;
use reflective_grpo::grpo::*;
use reflective_grpo::rewards::*;
use reflective_grpo::synthetic_env::*;
use reflective_grpo::toy_policy::*;

const SIZES: [usize; NUM_HEADS] = [3, 4, 2, 5];

fn cfg(beta: f64, kl_mode: KlMode, g: usize) -> ObjectiveConfig {
    ObjectiveConfig {
        kl_beta: beta,
        kl_mode,
        group_size: g,
        ..ObjectiveConfig::default()
    }
}

#[test]
fn gradient_matches_finite_differences_in_both_kl_modes() {
    let mut r = rng(1);
    for (i, mode) in [KlMode::Estimator, KlMode::Exact]
        .into_iter()
        .cycle()
        .take(20)
        .enumerate()
    {
        let policy = random_policy(&mut r, 5, SIZES, 0.8, if i % 3 == 0 { 0.7 } else { 1.0 });
        let old = perturbed(&policy, &mut r, 0.05);
        let reference = perturbed(&policy, &mut r, 0.5);
        let group = random_group(&mut r, &old, 6);
        let c = cfg(0.3, mode, 6);
        if clip_margin(&group, &policy, c.clip_epsilon) < 1e-3 {
            continue;
        }
        let analytic = grpo_gradient(&group, &policy, &reference, &c).unwrap();
        let numeric = finite_difference(&policy, 1e-5, |p| {
            grpo_objective(&group, p, &reference, &c).unwrap()
        });
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "instance {i} ({mode:?}): relative error {err}");
    }
}

#[test]
fn objective_matches_term_by_term_reimplementation() {
    let mut r = rng(2);
    for _ in 0..200 {
        let policy = random_policy(&mut r, 4, SIZES, 1.5, 1.0);
        let old = perturbed(&policy, &mut r, 0.4);
        let reference = perturbed(&policy, &mut r, 0.4);
        let group = random_group(&mut r, &old, 4);
        let c = cfg(0.05, KlMode::Estimator, 4);
        let fast = grpo_objective(&group, &policy, &reference, &c).unwrap();
        let slow = naive_objective(&group, &policy, &reference, &c);
        assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
    }
}

#[test]
fn objective_is_zero_at_the_old_policy_without_kl() {
    let mut r = rng(3);
    for _ in 0..100 {
        let policy = random_policy(&mut r, 4, SIZES, 1.0, 1.0);
        let group = random_group(&mut r, &policy, 8);
        let j = grpo_objective(&group, &policy, &policy, &cfg(0.0, KlMode::Estimator, 8)).unwrap();
        assert!(j.abs() < 1e-12, "{j}");
    }
}

#[test]
fn small_ascent_step_increases_the_objective() {
    let mut r = rng(4);
    let mut checked = 0;
    for _ in 0..50 {
        let policy = random_policy(&mut r, 4, SIZES, 1.0, 1.0);
        let group = random_group(&mut r, &policy, 8);
        if group.advantages.iter().all(|a| *a == 0.0) {
            continue;
        }
        let c = cfg(0.0, KlMode::Estimator, 8);
        let g = grpo_gradient(&group, &policy, &policy, &c).unwrap();
        let mut next = policy.clone();
        for (p, d) in next.params_mut().iter_mut().zip(&g) {
            *p += 1e-3 * d;
        }
        assert!(grpo_objective(&group, &next, &policy, &c).unwrap() > 0.0);
        checked += 1;
    }
    assert!(checked > 40);
}

#[test]
fn flat_clip_region_has_exactly_zero_surrogate_gradient() {
    let mut r = rng(5);
    let policy = random_policy(&mut r, 4, SIZES, 1.0, 1.0);
    let x = random_features(&mut r, 4);
    let c = cfg(0.0, KlMode::Estimator, 4);
    // Ratios far above 1+ε with positive advantages, and far below 1-ε with
    // negative ones: both sit on the clipped branch.
    for (shift, rewards) in [(-1.0, [1.0, 1.0, 1.0, 0.0]), (1.0, [0.0, 0.0, 0.0, 1.0])] {
        let choices: Vec<Choices> = (0..4).map(|_| policy.sample_choices(&x, &mut r)).collect();
        let rollouts: Vec<Rollout> = choices
            .iter()
            .zip(rewards)
            .map(|(ch, rw)| {
                let lp = policy.log_prob(&x, ch).unwrap();
                // the odd one out gets a ratio of exactly 1 on the opposite sign
                let old = if rw == rewards[3] { lp } else { lp + shift };
                rollout(*ch, old, rw)
            })
            .collect();
        let mut group = RolloutGroup::new(0, x.clone(), rollouts, 1e-8).unwrap();
        // keep only the clipped rollouts' contributions by zeroing the last advantage
        group.advantages[3] = 0.0;
        let grad = grpo_gradient(&group, &policy, &policy, &c).unwrap();
        assert!(grad.iter().all(|g| *g == 0.0));
    }
}

#[test]
fn zero_advantages_and_no_kl_give_zero_gradient() {
    let mut r = rng(6);
    let policy = random_policy(&mut r, 4, SIZES, 1.0, 1.0);
    let old = perturbed(&policy, &mut r, 0.1);
    let x = random_features(&mut r, 4);
    let rollouts: Vec<Rollout> = (0..5)
        .map(|_| {
            let ch = old.sample_choices(&x, &mut r);
            rollout(ch, old.log_prob(&x, &ch).unwrap(), 0.42)
        })
        .collect();
    let group = RolloutGroup::new(0, x, rollouts, 1e-8).unwrap();
    assert!(group.advantages.iter().all(|a| *a == 0.0));
    let reference = perturbed(&policy, &mut r, 0.5);
    let grad = grpo_gradient(&group, &policy, &reference, &cfg(0.0, KlMode::Estimator, 5)).unwrap();
    assert!(grad.iter().all(|g| *g == 0.0));
    // with β > 0 only the KL pull remains
    let grad = grpo_gradient(&group, &policy, &reference, &cfg(0.1, KlMode::Estimator, 5)).unwrap();
    assert!(grad.iter().any(|g| *g != 0.0));
}

#[test]
fn group_size_mismatch_is_rejected() {
    let mut r = rng(7);
    let policy = random_policy(&mut r, 3, SIZES, 1.0, 1.0);
    let group = random_group(&mut r, &policy, 4);
    assert!(matches!(
        grpo_objective(&group, &policy, &policy, &cfg(0.0, KlMode::Estimator, 8)),
        Err(GrpoError::InvalidGroup(_))
    ));
}

fn small_env(n: usize) -> Environment {
    let tax = EmotionTaxonomy::builtin("synthetic4").unwrap();
    let bank = ClauseBank::for_taxonomy(&tax, 2).unwrap();
    let scenes = generate_dataset(11, n, &tax, &bank, &SceneParams::default()).unwrap();
    Environment::new(tax, bank, scenes).unwrap()
}

fn train_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        ..TrainConfig::default()
    }
}

/// Oracle judge that starts failing after a fixed number of consistency calls.
struct FailsAfter {
    inner: OracleJudge,
    calls: AtomicUsize,
    limit: usize,
}

impl Judge for FailsAfter {
    fn judge_yes_no(
        &self,
        scene: &SceneRef,
        text: &str,
        prompt: &str,
    ) -> Result<Verdict, JudgeError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.limit {
            return Err(JudgeError::Unavailable {
                attempts: 3,
                reason: "HTTP 500".into(),
            });
        }
        self.inner.judge_yes_no(scene, text, prompt)
    }

    fn judge_emotion(
        &self,
        text: &str,
        prompt: &str,
        taxonomy: &EmotionTaxonomy,
    ) -> Result<EmotionVerdict, JudgeError> {
        self.inner.judge_emotion(text, prompt, taxonomy)
    }
}

#[test]
fn failed_step_leaves_policy_and_optimizer_untouched() {
    let env = small_env(8);
    let initial = ToyPolicy::for_bank(&env.bank, &env.taxonomy, env.feature_dim()).unwrap();
    let per_step = 8 * 8;
    let judge = FailsAfter {
        inner: OracleJudge::new(env.bank.clone()),
        calls: AtomicUsize::new(0),
        limit: 2 * per_step + per_step / 2,
    };
    let config = train_config(5);

    let mut trainer = Trainer::new(config, &env, &judge, initial.snapshot()).unwrap();
    let mut policy = initial.clone();
    for step in 0..2 {
        let old = policy.snapshot();
        trainer
            .training_step(step, &trainer.batch_for_step(step), &mut policy, &old)
            .unwrap();
    }
    let before = policy.clone();
    let old = policy.snapshot();
    let err = trainer
        .training_step(2, &trainer.batch_for_step(2), &mut policy, &old)
        .unwrap_err();
    assert!(err.is_judge_failure());
    assert_eq!(policy, before);
    assert_eq!(trainer.optimizer().updates, 2);

    judge.calls.store(0, Ordering::SeqCst);
    let abort = run_training(&config, &env, &judge, &initial, &mut |_| Ok(())).unwrap_err();
    assert!(abort.error.is_judge_failure());
    assert_eq!(abort.metrics.len(), 2);
    assert_eq!(abort.policy, before);
}

#[test]
fn worker_count_does_not_change_results() {
    let env = small_env(12);
    let judge = OracleJudge::new(env.bank.clone());
    let initial = ToyPolicy::for_bank(&env.bank, &env.taxonomy, env.feature_dim()).unwrap();
    let run = |workers: usize, batch_size: usize| {
        let config = TrainConfig {
            workers,
            batch_size,
            ..train_config(25)
        };
        run_training(&config, &env, &judge, &initial, &mut |_| Ok(())).unwrap()
    };
    for batch in [5, 16] {
        let serial = run(1, batch);
        let parallel = run(4, batch);
        assert_eq!(serial.metrics, parallel.metrics);
        assert_eq!(serial.policy, parallel.policy);
    }
}

#[test]
fn zero_steps_leave_the_policy_unchanged_and_metrics_match_steps() {
    let env = small_env(8);
    let judge = OracleJudge::new(env.bank.clone());
    let mut r = rng(8);
    let initial = ToyPolicy::for_bank(&env.bank, &env.taxonomy, env.feature_dim())
        .unwrap()
        .randomized(0.5, &mut r);
    let mut rows = 0;
    let out = run_training(&train_config(0), &env, &judge, &initial, &mut |_| {
        rows += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(out.policy, initial);
    assert!(out.metrics.is_empty());
    assert_eq!(rows, 0);

    for steps in [1, 7] {
        let mut rows = 0;
        let out = run_training(&train_config(steps), &env, &judge, &initial, &mut |_| {
            rows += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(out.metrics.len(), steps);
        assert_eq!(rows, steps);
        assert!(out.metrics.iter().enumerate().all(|(i, m)| m.step == i));
    }
}

#[test]
fn sink_failure_aborts_training() {
    let env = small_env(8);
    let judge = OracleJudge::new(env.bank.clone());
    let initial = ToyPolicy::for_bank(&env.bank, &env.taxonomy, env.feature_dim()).unwrap();
    let mut seen = 0;
    let abort = run_training(&train_config(10), &env, &judge, &initial, &mut |_| {
        seen += 1;
        if seen == 3 {
            Err(std::io::Error::other("disk full"))
        } else {
            Ok(())
        }
    })
    .unwrap_err();
    assert!(matches!(abort.error, GrpoError::Io(_)));
    assert_eq!(abort.metrics.len(), 2);
}

#[test]
fn equal_rewards_move_parameters_only_by_the_kl_pull() {
    let env = small_env(8);
    let judge = OracleJudge::new(env.bank.clone());
    let mut r = rng(9);
    // A near-deterministic policy samples the same output G times, so every
    // group has equal rewards and zero advantages.
    let policy = ToyPolicy::for_bank(&env.bank, &env.taxonomy, env.feature_dim())
        .unwrap()
        .randomized(1.0, &mut r)
        .with_temperature(0.01)
        .unwrap();
    let reference = ToyPolicy::for_bank(&env.bank, &env.taxonomy, env.feature_dim()).unwrap();

    for beta in [0.0, 0.05] {
        let config = TrainConfig {
            objective: ObjectiveConfig {
                kl_beta: beta,
                ..ObjectiveConfig::default()
            },
            learning_rate: 1e-4,
            ..train_config(1)
        };
        let mut trainer = Trainer::new(config, &env, &judge, reference.snapshot()).unwrap();
        let batch = trainer.batch_for_step(0);
        let old = policy.snapshot();
        let groups = trainer.collect_groups(0, &batch, &old).unwrap();
        assert!(groups
            .iter()
            .all(|g| g.advantages.iter().all(|a| *a == 0.0)));

        let mut updated = policy.clone();
        trainer
            .training_step(0, &batch, &mut updated, &old)
            .unwrap();
        if beta == 0.0 {
            assert_eq!(updated, policy);
        } else {
            assert_ne!(updated, policy);
            let kl = |p: &ToyPolicy| {
                env.scenes
                    .iter()
                    .map(|s| p.exact_kl(&reference, &s.features))
                    .sum::<f64>()
            };
            assert!(kl(&updated) < kl(&policy));
        }
    }
}
