//! Monte-Carlo policy-gradient training.
//!
//! Three advantage estimators share one on-policy update: REINFORCE with an
//! exponential-moving-average baseline, RLOO (leave-one-out group mean) and
//! GRPO (group mean and standard deviation). Each step samples `group_size`
//! rollouts for each of `rollout_batch / group_size` prompts, computes
//! advantages and takes a single gradient step.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exam_env::{mix, ValuedPrompt};
use crate::metrics::{compute_metrics, EvalResult, DEFAULT_BIN_FRACTION};
use crate::policy::{Context, Policy, Rollout};
use crate::value_model::{RewardModel, RewardSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorName {
    ReinforceBaseline,
    Rloo,
    Grpo,
}

impl fmt::Display for EstimatorName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorName::ReinforceBaseline => "reinforce_baseline",
            EstimatorName::Rloo => "rloo",
            EstimatorName::Grpo => "grpo",
        })
    }
}

impl FromStr for EstimatorName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reinforce_baseline" | "reinforce" => Ok(EstimatorName::ReinforceBaseline),
            "rloo" => Ok(EstimatorName::Rloo),
            "grpo" => Ok(EstimatorName::Grpo),
            other => Err(Error::Config(format!(
                "unknown estimator `{other}` (expected reinforce_baseline, rloo or grpo)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorKind {
    pub kind: EstimatorName,
    /// Rollouts per prompt per step.
    pub group_size: usize,
    pub baseline_decay: f64,
    pub grpo_std_floor: f64,
}

impl Default for EstimatorKind {
    fn default() -> Self {
        Self::rloo(8)
    }
}

impl EstimatorKind {
    pub fn rloo(group_size: usize) -> Self {
        Self {
            kind: EstimatorName::Rloo,
            group_size,
            baseline_decay: 0.9,
            grpo_std_floor: 1e-6,
        }
    }

    pub fn grpo(group_size: usize) -> Self {
        Self {
            kind: EstimatorName::Grpo,
            ..Self::rloo(group_size)
        }
    }

    pub fn reinforce(baseline_decay: f64) -> Self {
        Self {
            kind: EstimatorName::ReinforceBaseline,
            group_size: 1,
            baseline_decay,
            grpo_std_floor: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            EstimatorName::Rloo | EstimatorName::Grpo if self.group_size < 2 => {
                Err(Error::Config(format!(
                    "{} needs group_size >= 2, got {}",
                    self.kind, self.group_size
                )))
            }
            _ if self.group_size == 0 => Err(Error::Config("group_size must be >= 1".into())),
            _ if !(0.0..1.0).contains(&self.baseline_decay) => Err(Error::Config(format!(
                "baseline_decay must be in [0, 1), got {}",
                self.baseline_decay
            ))),
            _ if !(self.grpo_std_floor > 0.0) => Err(Error::Config(format!(
                "grpo_std_floor must be positive, got {}",
                self.grpo_std_floor
            ))),
            _ => Ok(()),
        }
    }
}

/// Advantages for one group (RLOO, GRPO) or one batch (REINFORCE).
/// `baseline` is read and then updated by REINFORCE only.
pub fn advantages(kind: &EstimatorKind, rewards: &[f64], baseline: &mut f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::EmptyInput("no rewards"));
    }
    let n = rewards.len() as f64;
    let sum: f64 = rewards.iter().sum();
    match kind.kind {
        EstimatorName::ReinforceBaseline => {
            let b = *baseline;
            *baseline = kind.baseline_decay * b + (1.0 - kind.baseline_decay) * sum / n;
            Ok(rewards.iter().map(|r| r - b).collect())
        }
        EstimatorName::Rloo | EstimatorName::Grpo if rewards.len() != kind.group_size => {
            Err(Error::GroupSize {
                expected: kind.group_size,
                got: rewards.len(),
            })
        }
        EstimatorName::Rloo => Ok(rewards.iter().map(|r| r - (sum - r) / (n - 1.0)).collect()),
        EstimatorName::Grpo => {
            let mean = sum / n;
            let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
            let denom = var.sqrt().max(kind.grpo_std_floor);
            Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
        }
    }
}

/// Per-rollout score-function direction `sum_t (onehot(y_t) - pi(.|ctx_t))`,
/// keyed by context, scaled by `weight`, added into `into`.
pub fn accumulate_score(
    policy: &Policy,
    rollout: &Rollout,
    weight: f64,
    into: &mut BTreeMap<Context, Vec<f64>>,
) {
    if weight == 0.0 {
        return;
    }
    for t in 0..rollout.tokens.len() {
        let ctx = policy.context(rollout.prompt_id, &rollout.tokens[..t]);
        let pi = policy.step_distribution(&ctx);
        let chosen = rollout.tokens[t] as usize;
        let row = into
            .entry(ctx)
            .or_insert_with(|| vec![0.0; policy.vocab_size()]);
        for (k, (g, p)) in row.iter_mut().zip(pi).enumerate() {
            let onehot = if k == chosen { 1.0 } else { 0.0 };
            *g += weight * (onehot - p);
        }
    }
}

/// `logits[ctx] += lr * A * (onehot(y_t) - pi(.|ctx))` for every step of
/// every rollout, with `pi` taken from the policy before the update.
pub fn apply_update(
    policy: &mut Policy,
    rollouts: &[Rollout],
    advantages: &[f64],
    lr: f64,
) -> Result<()> {
    if rollouts.len() != advantages.len() {
        return Err(Error::GroupSize {
            expected: rollouts.len(),
            got: advantages.len(),
        });
    }
    let mut grad = BTreeMap::new();
    for (rollout, &adv) in rollouts.iter().zip(advantages) {
        accumulate_score(policy, rollout, lr * adv, &mut grad);
    }
    for (ctx, delta) in grad {
        for (z, d) in policy.row_mut(&ctx).iter_mut().zip(delta) {
            *z += d;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum EvalMode {
    /// Argmax decoding, one response per prompt.
    Greedy,
    /// `samples` sampled responses per prompt.
    Sampled { samples: usize, seed: u64 },
}

pub fn evaluate(
    policy: &Policy,
    dataset: &[ValuedPrompt],
    rewards: &RewardModel,
    mode: EvalMode,
) -> Result<Vec<EvalResult>> {
    let mut out = Vec::new();
    for prompt in dataset {
        let rollouts = match mode {
            EvalMode::Greedy => vec![policy.greedy_rollout(prompt, rewards)?],
            EvalMode::Sampled { samples, seed } => (0..samples)
                .map(|i| {
                    policy.sample_rollout(
                        prompt,
                        rewards,
                        mix(&[seed, prompt.id, i as u64, 0xE7A1]),
                    )
                })
                .collect::<Result<_>>()?,
        };
        out.extend(rollouts.into_iter().map(|r| EvalResult {
            prompt_id: prompt.id,
            value: prompt.value,
            correct: r.correct,
            response_length: r.length,
        }));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub estimator: EstimatorKind,
    pub reward_spec: RewardSpec,
    pub learning_rate: f64,
    /// Rollouts per step.
    pub rollout_batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_mode: EvalMode,
    pub vocab_size: usize,
    pub max_len: usize,
    pub context_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorKind::default(),
            reward_spec: RewardSpec::default(),
            learning_rate: 0.05,
            rollout_batch: 128,
            epochs: 1,
            seed: 0,
            eval_every: 50,
            eval_mode: EvalMode::Greedy,
            vocab_size: 4,
            max_len: 6,
            context_window: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.estimator.validate()?;
        self.reward_spec.validate()?;
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if self.rollout_batch == 0 {
            return Err(Error::Config("rollout_batch must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if let EvalMode::Sampled { samples: 0, .. } = self.eval_mode {
            return Err(Error::Config(
                "sampled evaluation needs samples >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn prompts_per_step(&self) -> usize {
        (self.rollout_batch / self.estimator.group_size).max(1)
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.prompts_per_step())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogRecord {
    pub step: usize,
    /// Mean training reward over the steps since the previous record.
    pub mean_reward: f64,
    pub acc: f64,
    pub h_acc: f64,
    pub mean_length: f64,
    pub policy_checkpoint_ref: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub log: Vec<RunLogRecord>,
    pub rewards: RewardModel,
}

fn log_record(
    step: usize,
    policy: &Policy,
    dataset: &[ValuedPrompt],
    rewards: &RewardModel,
    config: &TrainConfig,
    reward_sum: f64,
    reward_count: usize,
) -> Result<RunLogRecord> {
    let results = evaluate(policy, dataset, rewards, config.eval_mode)?;
    let report = compute_metrics(&results, DEFAULT_BIN_FRACTION)?;
    Ok(RunLogRecord {
        step,
        mean_reward: if reward_count > 0 {
            reward_sum / reward_count as f64
        } else {
            0.0
        },
        acc: report.acc,
        h_acc: report.h_acc,
        mean_length: report.mean_length,
        policy_checkpoint_ref: None,
    })
}

/// Trains a fresh uniform policy on `dataset`.
pub fn train(config: &TrainConfig, dataset: &[ValuedPrompt]) -> Result<TrainOutcome> {
    let rewards = RewardModel::resolve(&config.reward_spec, dataset)?;
    train_with_rewards(config, dataset, rewards)
}

/// As [`train`] with an already resolved reward model.
pub fn train_with_rewards(
    config: &TrainConfig,
    dataset: &[ValuedPrompt],
    rewards: RewardModel,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    let mut policy = Policy::new(config.vocab_size, config.context_window, config.max_len)?;
    let group = config.estimator.group_size;
    let mut baseline = 0.0;
    let mut step = 0usize;
    let mut log = Vec::new();
    let (mut reward_sum, mut reward_count) = (0.0, 0usize);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[
            config.seed,
            epoch as u64,
            0x0DE5,
        ])));
        for chunk in order.chunks(config.prompts_per_step()) {
            let mut batch = Vec::with_capacity(chunk.len() * group);
            for &idx in chunk {
                let prompt = &dataset[idx];
                for g in 0..group {
                    let seed = mix(&[config.seed, step as u64, prompt.id, g as u64]);
                    batch.push(policy.sample_rollout(prompt, &rewards, seed)?);
                }
            }
            let batch_rewards: Vec<f64> = batch.iter().map(|r| r.reward).collect();
            reward_sum += batch_rewards.iter().sum::<f64>();
            reward_count += batch_rewards.len();
            let adv = match config.estimator.kind {
                EstimatorName::ReinforceBaseline => {
                    advantages(&config.estimator, &batch_rewards, &mut baseline)?
                }
                EstimatorName::Rloo | EstimatorName::Grpo => {
                    let mut all = Vec::with_capacity(batch_rewards.len());
                    for group_rewards in batch_rewards.chunks(group) {
                        all.extend(advantages(&config.estimator, group_rewards, &mut baseline)?);
                    }
                    all
                }
            };
            apply_update(&mut policy, &batch, &adv, config.learning_rate)?;
            step += 1;
            if step.is_multiple_of(config.eval_every) {
                log.push(log_record(
                    step,
                    &policy,
                    dataset,
                    &rewards,
                    config,
                    reward_sum,
                    reward_count,
                )?);
                (reward_sum, reward_count) = (0.0, 0);
            }
        }
    }
    if !step.is_multiple_of(config.eval_every) || step == 0 {
        log.push(log_record(
            step,
            &policy,
            dataset,
            &rewards,
            config,
            reward_sum,
            reward_count,
        )?);
    }
    Ok(TrainOutcome {
        policy,
        log,
        rewards,
    })
}
