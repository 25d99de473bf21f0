//! A desk-scale laboratory for value-scaled correctness rewards.
//!
//! Prompts carry a human value (their share of an exam). Correct answers are
//! rewarded with `1 + min(alpha * v, 1)`, small tabular autoregressive
//! policies are trained with REINFORCE, RLOO or GRPO, and an exhaustive
//! enumeration oracle computes exact objectives and logit gradients,
//! including the EOS-logit gradient that governs when responses stop.

// negated comparisons also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod cli;
pub mod error;
pub mod estimators;
pub mod exact_oracle;
pub mod exam_env;
pub mod metrics;
pub mod policy;
pub mod value_model;

pub use error::{Error, Result};
pub use estimators::{
    advantages, apply_update, evaluate, train, EstimatorKind, EstimatorName, EvalMode,
    RunLogRecord, TrainConfig, TrainOutcome,
};
pub use exact_oracle::{
    ContextStats, EnumeratedSpace, ExactOracle, GradReport, GradientConvention,
};
pub use exam_env::{
    generate_dataset, load_dataset, verify, ExamDatasetConfig, ScoreDistribution, ValuedPrompt,
    Verdict,
};
pub use metrics::{compute_metrics, EvalResult, MetricsReport};
pub use policy::{Context, Policy, Rollout, Token, EOS};
pub use value_model::{reward, scale_factor, RewardForm, RewardModel, RewardSpec};
