//! Human-defined prompt values and the rewards derived from them.
//!
//! A prompt's value is its share of the exam it came from. Correct answers
//! earn a reward scaled by `1 + min(alpha * v, 1)`; incorrect answers earn
//! nothing. The control variants (uniform scale, shuffled values, plain
//! correctness, unclipped multiplicative) live here too so that every
//! training run resolves rewards through one code path.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exam_env::ValuedPrompt;

pub const DEFAULT_ALPHA: f64 = 10.0;

/// A raw exam score together with its normalized share of the exam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HumanValue {
    pub raw_score: f64,
    pub exam_total: f64,
    pub normalized: f64,
}

impl HumanValue {
    pub fn new(raw_score: f64, exam_total: f64) -> Result<Self> {
        let normalized = normalize_value(raw_score, exam_total)?;
        Ok(Self {
            raw_score,
            exam_total,
            normalized,
        })
    }
}

pub fn normalize_value(raw_score: f64, exam_total: f64) -> Result<f64> {
    if !(exam_total > 0.0) || !exam_total.is_finite() {
        return Err(Error::Domain(format!(
            "exam_total must be positive and finite, got {exam_total}"
        )));
    }
    if !(0.0..=exam_total).contains(&raw_score) {
        return Err(Error::Domain(format!(
            "raw_score {raw_score} outside [0, {exam_total}]"
        )));
    }
    Ok(raw_score / exam_total)
}

fn check_unit(v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Domain(format!("value {v} outside [0, 1]")))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha >= 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "alpha must be finite and nonnegative, got {alpha}"
        )))
    }
}

/// `1 + min(alpha * v, 1)`, always in `[1, 2]`.
pub fn scale_factor(v: f64, alpha: f64) -> Result<f64> {
    check_unit(v)?;
    check_alpha(alpha)?;
    Ok(1.0 + (alpha * v).min(1.0))
}

/// The target objective: the prompt's value if answered correctly.
pub fn utility(v: f64, correct: bool) -> Result<f64> {
    check_unit(v)?;
    Ok(if correct { v } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardForm {
    HumanAligned,
    Multiplicative,
    Uniform,
    Shuffled,
    CorrectnessOnly,
}

impl RewardForm {
    pub const ALL: [RewardForm; 5] = [
        RewardForm::HumanAligned,
        RewardForm::Multiplicative,
        RewardForm::Uniform,
        RewardForm::Shuffled,
        RewardForm::CorrectnessOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RewardForm::HumanAligned => "human_aligned",
            RewardForm::Multiplicative => "multiplicative",
            RewardForm::Uniform => "uniform",
            RewardForm::Shuffled => "shuffled",
            RewardForm::CorrectnessOnly => "correctness_only",
        }
    }
}

impl fmt::Display for RewardForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RewardForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RewardForm::ALL
            .into_iter()
            .find(|form| form.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown reward form `{s}` (expected one of human_aligned, multiplicative, uniform, shuffled, correctness_only)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub form: RewardForm,
    pub alpha: f64,
    /// Constant reward for correct answers under [`RewardForm::Uniform`].
    /// `None` means "dataset mean of the scale factor", resolved at run start.
    pub uniform_scale: Option<f64>,
    pub shuffle_seed: u64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            form: RewardForm::HumanAligned,
            alpha: DEFAULT_ALPHA,
            uniform_scale: None,
            shuffle_seed: 0,
        }
    }
}

impl RewardSpec {
    pub fn new(form: RewardForm, alpha: f64) -> Self {
        Self {
            form,
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if let Some(scale) = self.uniform_scale {
            if !(scale >= 1.0) || !scale.is_finite() {
                return Err(Error::Domain(format!(
                    "uniform_scale must be finite and >= 1, got {scale}"
                )));
            }
        }
        Ok(())
    }

    /// Reward for a correct answer to a prompt whose (already resolved) value is `v`.
    pub fn correct_reward(&self, v: f64) -> Result<f64> {
        match self.form {
            RewardForm::HumanAligned | RewardForm::Shuffled => scale_factor(v, self.alpha),
            RewardForm::Multiplicative => {
                check_unit(v)?;
                check_alpha(self.alpha)?;
                Ok(1.0 + self.alpha * v)
            }
            RewardForm::Uniform => match self.uniform_scale {
                Some(scale) if scale >= 1.0 => Ok(scale),
                Some(scale) => Err(Error::Domain(format!(
                    "uniform_scale must be >= 1, got {scale}"
                ))),
                None => Err(Error::Config(
                    "uniform form needs a resolved uniform_scale".into(),
                )),
            },
            RewardForm::CorrectnessOnly => Ok(1.0),
        }
    }
}

/// Reward for one graded response. `v` must already be resolved for the
/// form: the permuted value for `shuffled`, ignored for `uniform`.
pub fn reward(spec: &RewardSpec, v: f64, correct: bool) -> Result<f64> {
    let on_correct = spec.correct_reward(v)?;
    Ok(if correct { on_correct } else { 0.0 })
}

/// Deterministic permutation of `values` (Fisher-Yates under ChaCha8).
pub fn shuffle_values(values: &[f64], seed: u64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::EmptyInput("shuffle_values needs at least one value"));
    }
    let mut out = values.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    out.shuffle(&mut rng);
    Ok(out)
}

/// Mean of `scale_factor(v, alpha)` over a dataset; the default uniform scale.
pub fn mean_scale_factor(values: &[f64], alpha: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("mean scale over an empty dataset"));
    }
    let mut total = 0.0;
    for &v in values {
        total += scale_factor(v, alpha)?;
    }
    Ok(total / values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyCategory {
    PrimarySchool,
    JuniorHigh,
    SeniorHigh,
    University,
    Phd,
}

impl DifficultyCategory {
    pub const ALL: [DifficultyCategory; 5] = [
        DifficultyCategory::PrimarySchool,
        DifficultyCategory::JuniorHigh,
        DifficultyCategory::SeniorHigh,
        DifficultyCategory::University,
        DifficultyCategory::Phd,
    ];

    /// Points awarded on the 100-point weak-label scale.
    pub fn points(self) -> f64 {
        match self {
            DifficultyCategory::PrimarySchool => 1.0,
            DifficultyCategory::JuniorHigh => 2.0,
            DifficultyCategory::SeniorHigh => 4.0,
            DifficultyCategory::University => 6.0,
            DifficultyCategory::Phd => 8.0,
        }
    }
}

pub fn difficulty_to_value(level: DifficultyCategory) -> f64 {
    level.points() / 100.0
}

/// A reward spec bound to a dataset: the uniform scale is resolved and the
/// shuffled value table, if any, is materialized once and then read-only.
#[derive(Debug, Clone)]
pub struct RewardModel {
    spec: RewardSpec,
    shuffled: Option<HashMap<u64, f64>>,
}

impl RewardModel {
    pub fn resolve(spec: &RewardSpec, dataset: &[ValuedPrompt]) -> Result<Self> {
        spec.validate()?;
        let mut spec = spec.clone();
        let values: Vec<f64> = dataset.iter().map(|p| p.value).collect();
        if spec.form == RewardForm::Uniform && spec.uniform_scale.is_none() {
            spec.uniform_scale = Some(mean_scale_factor(&values, spec.alpha)?);
        }
        let shuffled = if spec.form == RewardForm::Shuffled {
            let permuted = shuffle_values(&values, spec.shuffle_seed)?;
            Some(dataset.iter().map(|p| p.id).zip(permuted).collect())
        } else {
            None
        };
        Ok(Self { spec, shuffled })
    }

    /// Shuffled-form model with an explicit assignment of values to prompts,
    /// given as a permutation of dataset positions.
    pub fn with_permutation(
        spec: &RewardSpec,
        dataset: &[ValuedPrompt],
        permutation: &[usize],
    ) -> Result<Self> {
        let mut seen = vec![false; dataset.len()];
        if permutation.len() != dataset.len()
            || !permutation
                .iter()
                .all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true))
        {
            return Err(Error::Config(
                "permutation must be a bijection over dataset positions".into(),
            ));
        }
        let mut spec = spec.clone();
        spec.form = RewardForm::Shuffled;
        spec.validate()?;
        let shuffled = dataset
            .iter()
            .zip(permutation)
            .map(|(p, &src)| (p.id, dataset[src].value))
            .collect();
        Ok(Self {
            spec,
            shuffled: Some(shuffled),
        })
    }

    pub fn spec(&self) -> &RewardSpec {
        &self.spec
    }

    /// The value the reward is computed from for this prompt.
    pub fn effective_value(&self, prompt: &ValuedPrompt) -> f64 {
        self.shuffled
            .as_ref()
            .and_then(|table| table.get(&prompt.id).copied())
            .unwrap_or(prompt.value)
    }

    pub fn correct_reward(&self, prompt: &ValuedPrompt) -> Result<f64> {
        self.spec.correct_reward(self.effective_value(prompt))
    }

    pub fn reward(&self, prompt: &ValuedPrompt, correct: bool) -> Result<f64> {
        reward(&self.spec, self.effective_value(prompt), correct)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_value(10.0, 100.0).unwrap(), 0.1);
        assert_eq!(normalize_value(0.0, 150.0).unwrap(), 0.0);
        assert_eq!(normalize_value(150.0, 150.0).unwrap(), 1.0);
    }

    #[test]
    fn normalize_rejects_bad_domain() {
        assert!(matches!(normalize_value(1.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(normalize_value(1.0, -5.0), Err(Error::Domain(_))));
        assert!(matches!(normalize_value(-1.0, 10.0), Err(Error::Domain(_))));
        assert!(matches!(normalize_value(11.0, 10.0), Err(Error::Domain(_))));
    }

    #[test]
    fn scale_factor_examples() {
        assert!((scale_factor(0.02, 10.0).unwrap() - 1.2).abs() < 1e-15);
        assert_eq!(scale_factor(0.5, 10.0).unwrap(), 2.0);
        assert_eq!(scale_factor(0.0, 10.0).unwrap(), 1.0);
        assert!(scale_factor(1.5, 10.0).is_err());
        assert!(scale_factor(0.5, -1.0).is_err());
    }

    #[test]
    fn reward_examples() {
        let ha = RewardSpec::new(RewardForm::HumanAligned, 10.0);
        assert!((reward(&ha, 0.02, true).unwrap() - 1.2).abs() < 1e-15);
        let mult = RewardSpec::new(RewardForm::Multiplicative, 10.0);
        assert_eq!(reward(&mult, 0.5, true).unwrap(), 6.0);
        for form in RewardForm::ALL {
            let mut spec = RewardSpec::new(form, 10.0);
            spec.uniform_scale = Some(1.3);
            assert_eq!(reward(&spec, 0.9, false).unwrap(), 0.0);
        }
        assert_eq!(
            reward(
                &RewardSpec::new(RewardForm::CorrectnessOnly, 10.0),
                0.9,
                true
            )
            .unwrap(),
            1.0
        );
    }

    #[test]
    fn uniform_without_scale_is_a_config_error() {
        let spec = RewardSpec::new(RewardForm::Uniform, 10.0);
        assert!(matches!(reward(&spec, 0.1, true), Err(Error::Config(_))));
    }

    #[test]
    fn utility_examples() {
        assert_eq!(utility(0.1, true).unwrap(), 0.1);
        assert_eq!(utility(0.1, false).unwrap(), 0.0);
        assert_eq!(utility(1.0, true).unwrap(), 1.0);
        assert!(utility(1.1, true).is_err());
    }

    #[test]
    fn shuffle_examples() {
        let out = shuffle_values(&[0.1, 0.2, 0.3], 7).unwrap();
        let mut sorted = out.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, vec![0.1, 0.2, 0.3]);
        assert_eq!(shuffle_values(&[0.5], 123).unwrap(), vec![0.5]);
        assert!(shuffle_values(&[], 1).is_err());
        assert_eq!(out, shuffle_values(&[0.1, 0.2, 0.3], 7).unwrap());
    }

    #[test]
    fn difficulty_mapping() {
        assert_eq!(difficulty_to_value(DifficultyCategory::PrimarySchool), 0.01);
        assert_eq!(difficulty_to_value(DifficultyCategory::JuniorHigh), 0.02);
        assert_eq!(difficulty_to_value(DifficultyCategory::SeniorHigh), 0.04);
        assert_eq!(difficulty_to_value(DifficultyCategory::University), 0.06);
        assert_eq!(difficulty_to_value(DifficultyCategory::Phd), 0.08);
    }

    #[test]
    fn form_names_round_trip() {
        for form in RewardForm::ALL {
            assert_eq!(form.as_str().parse::<RewardForm>().unwrap(), form);
        }
        assert!("bogus".parse::<RewardForm>().is_err());
    }

    proptest! {
        #[test]
        fn scale_factor_bounded_and_monotone(v in 0.0f64..=1.0, dv in 0.0f64..=1.0,
                                             alpha in 0.0f64..50.0, da in 0.0f64..10.0) {
            let s = scale_factor(v, alpha).unwrap();
            prop_assert!((1.0..=2.0).contains(&s));
            let v2 = (v + dv).min(1.0);
            prop_assert!(scale_factor(v2, alpha).unwrap() >= s);
            prop_assert!(scale_factor(v, alpha + da).unwrap() >= s);
        }

        #[test]
        fn human_aligned_dominates_correctness_only(v in 0.0f64..=1.0, alpha in 0.0f64..50.0) {
            let ha = reward(&RewardSpec::new(RewardForm::HumanAligned, alpha), v, true).unwrap();
            let co = reward(&RewardSpec::new(RewardForm::CorrectnessOnly, alpha), v, true).unwrap();
            prop_assert!(ha >= co);
            prop_assert_eq!(ha == co, alpha * v == 0.0);
        }

        #[test]
        fn uniform_is_constant_in_value(v in 0.0f64..=1.0, w in 0.0f64..=1.0, scale in 1.0f64..3.0) {
            let mut spec = RewardSpec::new(RewardForm::Uniform, 10.0);
            spec.uniform_scale = Some(scale);
            prop_assert_eq!(reward(&spec, v, true).unwrap(), reward(&spec, w, true).unwrap());
        }

        #[test]
        fn shuffle_preserves_multiset(values in prop::collection::vec(0.0f64..=1.0, 1..64), seed: u64) {
            let out = shuffle_values(&values, seed).unwrap();
            let mut a = values.clone();
            let mut b = out.clone();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
            // scale-factor sums agree when every answer is correct
            let sa: f64 = values.iter().map(|&v| scale_factor(v, 10.0).unwrap()).sum();
            let sb: f64 = out.iter().map(|&v| scale_factor(v, 10.0).unwrap()).sum();
            prop_assert!((sa - sb).abs() < 1e-9);
        }
    }
}
