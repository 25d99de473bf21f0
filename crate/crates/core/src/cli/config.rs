//! Flat key-value run configuration shared by every subcommand.
//!
//! Values come from built-in defaults, then an optional TOML file, then
//! command-line flags. The resolved configuration is written back as TOML so
//! a run can be repeated with `--config`.

use std::path::{Component, Path};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{EstimatorKind, EstimatorName, EvalMode, TrainConfig};
use crate::exact_oracle::DEFAULT_BUDGET;
use crate::exam_env::{ExamDatasetConfig, ScoreDistribution};
use crate::metrics::DEFAULT_BIN_FRACTION;
use crate::value_model::{RewardForm, RewardSpec, DEFAULT_ALPHA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModeName {
    Greedy,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset JSONL to read; a dataset is generated when absent.
    pub data: Option<String>,
    /// File name of the dataset written by `gen-data`.
    pub out: String,
    pub exams: usize,
    pub questions: usize,
    pub vocab: usize,
    pub answer_length: usize,
    pub prompt_length: usize,
    pub scores: ScoreDistribution,
    pub data_seed: u64,

    pub estimator: EstimatorName,
    pub group_size: usize,
    pub baseline_decay: f64,
    pub grpo_std_floor: f64,
    pub reward: RewardForm,
    pub alpha: f64,
    pub uniform_scale: Option<f64>,
    pub shuffle_seed: u64,
    pub learning_rate: f64,
    pub rollout_batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_mode: EvalModeName,
    pub eval_samples: usize,
    pub max_len: usize,
    pub context_window: usize,
    pub bin_fraction: f64,

    pub checkpoint: Option<String>,
    pub trials: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub budget: u64,
    pub forms: Vec<RewardForm>,
    pub seeds: Vec<u64>,
    pub alphas: Vec<f64>,
    pub cohort_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = ExamDatasetConfig::default();
        let train = TrainConfig::default();
        Self {
            data: None,
            out: "dataset.jsonl".into(),
            exams: data.num_exams,
            questions: data.questions_per_exam,
            vocab: data.vocab_size,
            answer_length: data.answer_length,
            prompt_length: data.prompt_length,
            scores: data.score_distribution,
            data_seed: 0,
            estimator: train.estimator.kind,
            group_size: train.estimator.group_size,
            baseline_decay: train.estimator.baseline_decay,
            grpo_std_floor: train.estimator.grpo_std_floor,
            reward: RewardForm::HumanAligned,
            alpha: DEFAULT_ALPHA,
            uniform_scale: None,
            shuffle_seed: 0,
            learning_rate: train.learning_rate,
            rollout_batch: train.rollout_batch,
            epochs: train.epochs,
            seed: 0,
            eval_every: train.eval_every,
            eval_mode: EvalModeName::Greedy,
            eval_samples: 16,
            max_len: train.max_len,
            context_window: train.context_window,
            bin_fraction: DEFAULT_BIN_FRACTION,
            checkpoint: None,
            trials: 100,
            eps: 1e-5,
            tolerance: 1e-6,
            budget: DEFAULT_BUDGET,
            forms: RewardForm::ALL.to_vec(),
            seeds: vec![0, 1, 2, 3, 4],
            alphas: vec![1.0, 5.0, 10.0, 15.0, 20.0],
            cohort_size: 50,
        }
    }
}

/// A key set on the command line, with the file's value if the file set it too.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Override {
    pub key: String,
    pub flag_value: String,
    pub file_value: Option<String>,
}

fn range_error(key: &str, message: impl std::fmt::Display) -> Error {
    Error::Config(format!("`{key}` {message}"))
}

fn positive(key: &str, value: usize) -> Result<()> {
    if value == 0 {
        return Err(range_error(key, "must be >= 1"));
    }
    Ok(())
}

fn finite_nonnegative(key: &str, value: f64) -> Result<()> {
    if !(value >= 0.0 && value.is_finite()) {
        return Err(range_error(
            key,
            format!("must be finite and >= 0, got {value}"),
        ));
    }
    Ok(())
}

/// Output file names must stay inside the output directory.
pub fn check_relative(key: &str, name: &str) -> Result<()> {
    let path = Path::new(name);
    let plain = path
        .components()
        .all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
    if name.is_empty() || !plain {
        return Err(range_error(
            key,
            format!("must be a relative path inside the output directory, got `{name}`"),
        ));
    }
    Ok(())
}

impl RunConfig {
    /// Merges `file` then `flags` over the defaults and validates the result.
    pub fn resolve(file: Option<&str>, flags: toml::Table) -> Result<(Self, Vec<Override>)> {
        let mut merged = match file {
            Some(text) => text
                .parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("config file: {}", e.message())))?,
            None => toml::Table::new(),
        };
        let mut overrides = Vec::new();
        for (key, value) in flags {
            overrides.push(Override {
                key: key.clone(),
                flag_value: value.to_string(),
                file_value: merged.get(&key).map(ToString::to_string),
            });
            merged.insert(key, value);
        }
        // deserializing from text keeps the offending line in the diagnostic
        let text = toml::to_string(&merged).map_err(|e| Error::Config(e.to_string()))?;
        let config: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok((config, overrides))
    }

    pub fn validate(&self) -> Result<()> {
        check_relative("out", &self.out)?;
        positive("exams", self.exams)?;
        positive("questions", self.questions)?;
        positive("group_size", self.group_size)?;
        positive("rollout_batch", self.rollout_batch)?;
        positive("eval_every", self.eval_every)?;
        positive("eval_samples", self.eval_samples)?;
        positive("max_len", self.max_len)?;
        positive("trials", self.trials)?;
        positive("cohort_size", self.cohort_size)?;
        if self.vocab < 2 {
            return Err(range_error(
                "vocab",
                format!("must be >= 2, got {}", self.vocab),
            ));
        }
        finite_nonnegative("alpha", self.alpha)?;
        finite_nonnegative("learning_rate", self.learning_rate)?;
        if !(self.baseline_decay >= 0.0 && self.baseline_decay < 1.0) {
            return Err(range_error(
                "baseline_decay",
                format!("must be in [0, 1), got {}", self.baseline_decay),
            ));
        }
        if !(self.grpo_std_floor > 0.0 && self.grpo_std_floor.is_finite()) {
            return Err(range_error("grpo_std_floor", "must be finite and > 0"));
        }
        if let Some(s) = self.uniform_scale {
            if !(s >= 1.0 && s.is_finite()) {
                return Err(range_error(
                    "uniform_scale",
                    format!("must be finite and >= 1, got {s}"),
                ));
            }
        }
        if !(self.bin_fraction > 0.0 && self.bin_fraction <= 0.5) {
            return Err(range_error(
                "bin_fraction",
                format!("must be in (0, 0.5], got {}", self.bin_fraction),
            ));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(range_error(
                "eps",
                format!("must be finite and > 0, got {}", self.eps),
            ));
        }
        if !(self.tolerance > 0.0) {
            return Err(range_error(
                "tolerance",
                format!("must be > 0, got {}", self.tolerance),
            ));
        }
        if self.forms.is_empty() {
            return Err(range_error("forms", "must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(range_error("seeds", "must not be empty"));
        }
        if self.alphas.is_empty() {
            return Err(range_error("alphas", "must not be empty"));
        }
        for &a in &self.alphas {
            finite_nonnegative("alphas", a)?;
        }
        self.dataset_config()?.validate()?;
        self.train_config().validate()
    }

    pub fn dataset_config(&self) -> Result<ExamDatasetConfig> {
        Ok(ExamDatasetConfig {
            vocab_size: self.vocab,
            num_exams: self.exams,
            questions_per_exam: self.questions,
            answer_length: self.answer_length,
            score_distribution: self.scores,
            seed: self.data_seed,
            prompt_length: self.prompt_length,
            ..Default::default()
        })
    }

    pub fn reward_spec(&self) -> RewardSpec {
        RewardSpec {
            form: self.reward,
            alpha: self.alpha,
            uniform_scale: self.uniform_scale,
            shuffle_seed: self.shuffle_seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let estimator = match self.estimator {
            EstimatorName::ReinforceBaseline => EstimatorKind::reinforce(self.baseline_decay),
            EstimatorName::Rloo => EstimatorKind::rloo(self.group_size),
            EstimatorName::Grpo => EstimatorKind::grpo(self.group_size),
        };
        TrainConfig {
            estimator: EstimatorKind {
                baseline_decay: self.baseline_decay,
                grpo_std_floor: self.grpo_std_floor,
                ..estimator
            },
            reward_spec: self.reward_spec(),
            learning_rate: self.learning_rate,
            rollout_batch: self.rollout_batch,
            epochs: self.epochs,
            seed: self.seed,
            eval_every: self.eval_every,
            eval_mode: self.eval_mode(),
            vocab_size: self.vocab,
            max_len: self.max_len,
            context_window: self.context_window,
        }
    }

    pub fn eval_mode(&self) -> EvalMode {
        match self.eval_mode {
            EvalModeName::Greedy => EvalMode::Greedy,
            EvalModeName::Sampled => EvalMode::Sampled {
                samples: self.eval_samples,
                seed: self.seed,
            },
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(pairs: &[(&str, toml::Value)]) -> toml::Table {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn defaults() {
        let (c, overrides) = RunConfig::resolve(None, toml::Table::new()).unwrap();
        assert_eq!(c, RunConfig::default());
        assert!(overrides.is_empty());
        assert_eq!(c.alpha, 10.0);
        assert_eq!(c.estimator, EstimatorName::Rloo);
        assert_eq!(c.group_size, 8);
        assert_eq!(c.seed, 0);
    }

    #[test]
    fn flag_beats_file_and_is_noted() {
        let (c, overrides) = RunConfig::resolve(
            Some("alpha = 5.0\nepochs = 3\n"),
            flags(&[("alpha", 2.0.into())]),
        )
        .unwrap();
        assert_eq!(c.alpha, 2.0);
        assert_eq!(c.epochs, 3);
        assert_eq!(
            overrides,
            vec![Override {
                key: "alpha".into(),
                flag_value: "2.0".into(),
                file_value: Some("5.0".into()),
            }]
        );
    }

    #[test]
    fn diagnostics_name_the_key() {
        let err = RunConfig::resolve(None, flags(&[("alpha", (-1.0).into())])).unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");
        let err = RunConfig::resolve(Some("alpah = 1.0"), toml::Table::new()).unwrap_err();
        assert!(err.to_string().contains("alpah"), "{err}");
        let err = RunConfig::resolve(Some("epochs = \"many\""), toml::Table::new()).unwrap_err();
        assert!(err.to_string().contains("epochs"), "{err}");
        let err = RunConfig::resolve(Some("out = \"../x.jsonl\""), toml::Table::new()).unwrap_err();
        assert!(err.to_string().contains("out"), "{err}");
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig {
            alpha: 0.1 + 0.2,
            data: Some("d.jsonl".into()),
            ..Default::default()
        };
        let (back, _) =
            RunConfig::resolve(Some(&c.to_toml().unwrap()), toml::Table::new()).unwrap();
        assert_eq!(back, c);
    }
}
