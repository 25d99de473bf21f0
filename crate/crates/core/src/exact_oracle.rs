//! Exhaustive enumeration of small rollout spaces.
//!
//! For a prompt `x`, a non-terminated prefix `h` and a token `v`, let
//! `p_v(h)` be the probability that the finished response is correct given
//! that `v` is emitted after `h`. With a reward `s(x)` for correct answers,
//! the conditional gradient of the objective with respect to the logits of
//! the row that `h` reads from is
//!
//! ```text
//! dJ/dz_k = pi_k * s(x) * (p_k - sum_v pi_v p_v)
//! ```
//!
//! and the EOS entry reduces to `s * pi_e (1 - pi_e) (p_e - pbar_not_eos)`.
//!
//! A logit row is shared by every prefix that maps to the same [`Context`],
//! so the total derivative of `J` is the reach-weighted sum of the
//! conditional gradients over those prefixes. Both conventions are exposed;
//! finite differences can only observe the reach-weighted one.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exam_env::{verify, ValuedPrompt};
use crate::policy::{Context, Policy, Token, EOS};
use crate::value_model::{RewardForm, RewardSpec};

pub const DEFAULT_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedSequence {
    pub tokens: Vec<Token>,
    pub probability: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedSpace {
    pub prompt_id: u64,
    pub sequences: Vec<EnumeratedSequence>,
    pub total_probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientConvention {
    /// Per-context form: conditioned on reaching the context.
    Conditional,
    /// Total derivative of the objective: conditional form times `P(reach)`.
    ReachWeighted,
}

/// Exact quantities for one logit row.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextStats {
    pub context: Context,
    /// Probability that generation passes through this row.
    pub reach: f64,
    pub pi: Vec<f64>,
    /// `p_v` conditioned on reaching the row.
    pub p: Vec<f64>,
}

impl ContextStats {
    pub fn mean_p(&self) -> f64 {
        self.pi.iter().zip(&self.p).map(|(a, b)| a * b).sum()
    }

    /// `p_k - sum_v pi_v p_v` for every token.
    pub fn advantages(&self) -> Vec<f64> {
        let mean = self.mean_p();
        self.p.iter().map(|pk| pk - mean).collect()
    }

    /// `(1 / (1 - pi_e)) sum_{v != e} pi_v p_v`; `None` when `pi_e == 1`.
    pub fn p_bar_not_eos(&self) -> Option<f64> {
        let rest = 1.0 - self.pi[EOS as usize];
        if rest <= 0.0 {
            return None;
        }
        let weighted: f64 = self
            .pi
            .iter()
            .zip(&self.p)
            .skip(1)
            .map(|(a, b)| a * b)
            .sum();
        Some(weighted / rest)
    }

    fn weight(&self, convention: GradientConvention) -> f64 {
        match convention {
            GradientConvention::Conditional => 1.0,
            GradientConvention::ReachWeighted => self.reach,
        }
    }

    pub fn gradient(&self, scale: f64, convention: GradientConvention) -> Vec<f64> {
        let w = self.weight(convention);
        self.pi
            .iter()
            .zip(self.advantages())
            .map(|(pi_k, adv)| w * pi_k * scale * adv)
            .collect()
    }

    pub fn eos_gradient(&self, scale: f64, convention: GradientConvention) -> EosGradient {
        let pi_e = self.pi[EOS as usize];
        let p_e = self.p[EOS as usize];
        match self.p_bar_not_eos() {
            Some(p_bar) => EosGradient {
                value: self.weight(convention) * scale * pi_e * (1.0 - pi_e) * (p_e - p_bar),
                pi_e,
                p_e,
                p_bar_not_eos: Some(p_bar),
                degenerate: false,
            },
            None => EosGradient {
                value: 0.0,
                pi_e,
                p_e,
                p_bar_not_eos: None,
                degenerate: true,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EosGradient {
    pub value: f64,
    pub pi_e: f64,
    pub p_e: f64,
    pub p_bar_not_eos: Option<f64>,
    /// Set when `pi_e == 1` and the continuation average is undefined.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub context: Context,
    pub token_index: usize,
    pub analytic: f64,
    pub finite_difference: f64,
    pub eos_formula: Option<f64>,
    pub max_abs_error: f64,
}

#[derive(Debug, Serialize)]
struct GradReportRow {
    trial: usize,
    context: String,
    token: usize,
    analytic: f64,
    finite_difference: f64,
    eos_formula: Option<f64>,
    max_abs_error: f64,
}

/// One CSV row per (trial, context, token); `trial` tags the instance.
pub fn write_grad_reports_csv<'a, W: Write>(
    reports: impl IntoIterator<Item = (usize, &'a GradReport)>,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for (trial, r) in reports {
        w.serialize(GradReportRow {
            trial,
            context: r.context.key(),
            token: r.token_index,
            analytic: r.analytic,
            finite_difference: r.finite_difference,
            eos_formula: r.eos_formula,
            max_abs_error: r.max_abs_error,
        })?;
    }
    w.flush().map_err(|e| Error::io("<grad report writer>", e))
}

/// Number of feasible responses: `sum_{L<T} (V-1)^L + (V-1)^T`.
pub fn sequence_count(vocab_size: usize, max_len: usize) -> u128 {
    let b = (vocab_size as u128).saturating_sub(1);
    let mut power = 1u128;
    let mut total = 0u128;
    for _ in 0..max_len {
        total = total.saturating_add(power);
        power = power.saturating_mul(b);
    }
    total.saturating_add(power)
}

/// Reward earned by a correct answer to `prompt` under `spec`, taking the
/// prompt's stored value as already resolved.
fn correct_reward(spec: &RewardSpec, prompt: &ValuedPrompt) -> Result<f64> {
    if spec.form == RewardForm::Uniform && spec.uniform_scale.is_none() {
        return Err(Error::Config(
            "oracle needs an explicit uniform_scale for the uniform form".into(),
        ));
    }
    spec.correct_reward(prompt.value)
}

#[derive(Debug, Clone, Copy)]
pub struct ExactOracle {
    pub budget: u64,
}

impl Default for ExactOracle {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
        }
    }
}

impl ExactOracle {
    pub fn new(budget: u64) -> Self {
        Self { budget }
    }

    pub fn check_budget(&self, policy: &Policy) -> Result<()> {
        let sequences = sequence_count(policy.vocab_size(), policy.max_len());
        if sequences > self.budget as u128 {
            return Err(Error::Budget {
                vocab_size: policy.vocab_size(),
                max_len: policy.max_len(),
                sequences,
                budget: self.budget,
            });
        }
        Ok(())
    }

    pub fn enumerate(&self, policy: &Policy, prompt: &ValuedPrompt) -> Result<EnumeratedSpace> {
        self.check_budget(policy)?;
        let mut sequences = Vec::new();
        let mut stack: Vec<(Vec<Token>, f64)> = vec![(Vec::new(), 1.0)];
        while let Some((prefix, reach)) = stack.pop() {
            let dist = policy.step_distribution(&policy.context(prompt.id, &prefix));
            let mut done = prefix.clone();
            done.push(EOS);
            sequences.push(EnumeratedSequence {
                correct: verify(&prefix, &prompt.reference_answer).correct,
                tokens: done,
                probability: reach * dist[EOS as usize],
            });
            // push in reverse so the stack yields tokens in ascending order
            for tok in (1..policy.vocab_size()).rev() {
                let mut next = prefix.clone();
                next.push(tok as Token);
                let p = reach * dist[tok];
                if next.len() == policy.max_len() {
                    sequences.push(EnumeratedSequence {
                        correct: verify(&next, &prompt.reference_answer).correct,
                        tokens: next,
                        probability: p,
                    });
                } else {
                    stack.push((next, p));
                }
            }
        }
        let total_probability = sequences.iter().map(|s| s.probability).sum();
        Ok(EnumeratedSpace {
            prompt_id: prompt.id,
            sequences,
            total_probability,
        })
    }

    /// `P(correct)` under the policy.
    pub fn success_probability(&self, policy: &Policy, prompt: &ValuedPrompt) -> Result<f64> {
        Ok(self
            .enumerate(policy, prompt)?
            .sequences
            .iter()
            .filter(|s| s.correct)
            .map(|s| s.probability)
            .sum())
    }

    /// Expected response length (non-EOS tokens).
    pub fn expected_length(&self, policy: &Policy, prompt: &ValuedPrompt) -> Result<f64> {
        Ok(self
            .enumerate(policy, prompt)?
            .sequences
            .iter()
            .map(|s| s.probability * s.tokens.iter().filter(|&&t| t != EOS).count() as f64)
            .sum())
    }

    pub fn exact_objective(
        &self,
        policy: &Policy,
        prompt: &ValuedPrompt,
        spec: &RewardSpec,
    ) -> Result<f64> {
        let scale = correct_reward(spec, prompt)?;
        Ok(scale * self.success_probability(policy, prompt)?)
    }

    /// `p_v`: probability of finishing correct after emitting `v` following `prefix`.
    pub fn correctness_probability(
        &self,
        policy: &Policy,
        prompt: &ValuedPrompt,
        prefix: &[Token],
        v: Token,
    ) -> Result<f64> {
        self.check_budget(policy)?;
        if prefix.contains(&EOS) {
            return Err(Error::Infeasible(format!(
                "prefix {prefix:?} already terminated"
            )));
        }
        if prefix.len() >= policy.max_len() {
            return Err(Error::Infeasible(format!(
                "prefix of length {} leaves no step before max_len={}",
                prefix.len(),
                policy.max_len()
            )));
        }
        if v as usize >= policy.vocab_size()
            || prefix.iter().any(|&t| t as usize >= policy.vocab_size())
        {
            return Err(Error::Infeasible("token outside the vocabulary".into()));
        }
        if v == EOS {
            return Ok(if verify(prefix, &prompt.reference_answer).correct {
                1.0
            } else {
                0.0
            });
        }
        let mut next = prefix.to_vec();
        next.push(v);
        Ok(success_after(policy, prompt, &mut next))
    }

    /// Reach and reach-conditioned `p_v` for every row visited by `prompt`.
    pub fn context_stats(
        &self,
        policy: &Policy,
        prompt: &ValuedPrompt,
    ) -> Result<Vec<ContextStats>> {
        self.check_budget(policy)?;
        let mut acc: BTreeMap<Context, (f64, Vec<f64>)> = BTreeMap::new();
        let mut prefix = Vec::new();
        accumulate(policy, prompt, &mut prefix, 1.0, &mut acc);
        Ok(acc
            .into_iter()
            .map(|(context, (reach, weighted))| {
                let pi = policy.step_distribution(&context);
                let p = weighted.iter().map(|w| w / reach).collect();
                ContextStats {
                    context,
                    reach,
                    pi,
                    p,
                }
            })
            .collect())
    }

    fn stats_for(
        &self,
        policy: &Policy,
        prompt: &ValuedPrompt,
        ctx: &Context,
    ) -> Result<ContextStats> {
        if ctx.prompt_id != prompt.id {
            return Err(Error::Unreachable(format!(
                "context {} belongs to another prompt",
                ctx.key()
            )));
        }
        self.context_stats(policy, prompt)?
            .into_iter()
            .find(|s| &s.context == ctx && s.reach > 0.0)
            .ok_or_else(|| Error::Unreachable(ctx.key()))
    }

    pub fn exact_logit_gradient(
        &self,
        policy: &Policy,
        prompt: &ValuedPrompt,
        ctx: &Context,
        spec: &RewardSpec,
        convention: GradientConvention,
    ) -> Result<Vec<f64>> {
        let scale = correct_reward(spec, prompt)?;
        Ok(self
            .stats_for(policy, prompt, ctx)?
            .gradient(scale, convention))
    }

    pub fn eos_gradient(
        &self,
        policy: &Policy,
        prompt: &ValuedPrompt,
        ctx: &Context,
        spec: &RewardSpec,
        convention: GradientConvention,
    ) -> Result<EosGradient> {
        let scale = correct_reward(spec, prompt)?;
        Ok(self
            .stats_for(policy, prompt, ctx)?
            .eos_gradient(scale, convention))
    }

    /// Central differences of [`Self::exact_objective`] in each logit of `ctx`.
    pub fn finite_difference_gradient(
        &self,
        policy: &Policy,
        prompt: &ValuedPrompt,
        ctx: &Context,
        spec: &RewardSpec,
        eps: f64,
    ) -> Result<Vec<f64>> {
        if !(eps > 0.0) {
            return Err(Error::Domain(format!("eps must be positive, got {eps}")));
        }
        self.check_budget(policy)?;
        let mut probe = policy.clone();
        let base = policy.logits(ctx);
        let mut out = Vec::with_capacity(base.len());
        for k in 0..base.len() {
            probe.row_mut(ctx)[k] = base[k] + eps;
            let up = self.exact_objective(&probe, prompt, spec)?;
            probe.row_mut(ctx)[k] = base[k] - eps;
            let down = self.exact_objective(&probe, prompt, spec)?;
            probe.row_mut(ctx)[k] = base[k];
            out.push((up - down) / (2.0 * eps));
        }
        Ok(out)
    }

    /// Reach-weighted analytic gradient against finite differences for every
    /// row the prompt can visit.
    pub fn grad_reports(
        &self,
        policy: &Policy,
        prompt: &ValuedPrompt,
        spec: &RewardSpec,
        eps: f64,
    ) -> Result<Vec<GradReport>> {
        let scale = correct_reward(spec, prompt)?;
        let mut reports = Vec::new();
        for stats in self.context_stats(policy, prompt)? {
            let analytic = stats.gradient(scale, GradientConvention::ReachWeighted);
            let eos = stats.eos_gradient(scale, GradientConvention::ReachWeighted);
            let fd = self.finite_difference_gradient(policy, prompt, &stats.context, spec, eps)?;
            for (k, (&a, &f)) in analytic.iter().zip(&fd).enumerate() {
                reports.push(GradReport {
                    context: stats.context.clone(),
                    token_index: k,
                    analytic: a,
                    finite_difference: f,
                    eos_formula: (k == EOS as usize).then_some(eos.value),
                    max_abs_error: (a - f).abs(),
                });
            }
        }
        Ok(reports)
    }
}

/// `P(correct | prefix)` for a non-terminated prefix; `prefix` is restored on return.
fn success_after(policy: &Policy, prompt: &ValuedPrompt, prefix: &mut Vec<Token>) -> f64 {
    if prefix.len() == policy.max_len() {
        return if verify(prefix, &prompt.reference_answer).correct {
            1.0
        } else {
            0.0
        };
    }
    let dist = policy.step_distribution(&policy.context(prompt.id, prefix));
    let mut total = if verify(prefix, &prompt.reference_answer).correct {
        dist[EOS as usize]
    } else {
        0.0
    };
    for tok in 1..policy.vocab_size() {
        prefix.push(tok as Token);
        total += dist[tok] * success_after(policy, prompt, prefix);
        prefix.pop();
    }
    total
}

/// Walks every prefix, adding `P(h)` and `P(h) p_v(h)` into the row `h` reads.
/// Returns `P(correct | h)`.
fn accumulate(
    policy: &Policy,
    prompt: &ValuedPrompt,
    prefix: &mut Vec<Token>,
    reach: f64,
    acc: &mut BTreeMap<Context, (f64, Vec<f64>)>,
) -> f64 {
    let ctx = policy.context(prompt.id, prefix);
    let dist = policy.step_distribution(&ctx);
    let mut p = vec![0.0; policy.vocab_size()];
    if verify(prefix, &prompt.reference_answer).correct {
        p[EOS as usize] = 1.0;
    }
    for tok in 1..policy.vocab_size() {
        prefix.push(tok as Token);
        p[tok] = if prefix.len() == policy.max_len() {
            if verify(prefix, &prompt.reference_answer).correct {
                1.0
            } else {
                0.0
            }
        } else {
            accumulate(policy, prompt, prefix, reach * dist[tok], acc)
        };
        prefix.pop();
    }
    let entry = acc
        .entry(ctx)
        .or_insert_with(|| (0.0, vec![0.0; policy.vocab_size()]));
    entry.0 += reach;
    for (w, pv) in entry.1.iter_mut().zip(&p) {
        *w += reach * pv;
    }
    dist.iter().zip(&p).map(|(a, b)| a * b).sum()
}

/// A random small instance for gradient checks.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub policy: Policy,
    pub prompt: ValuedPrompt,
    pub spec: RewardSpec,
}

impl RandomInstance {
    /// Random logits in `[-2, 2]` on every reachable row, a random answer of
    /// length `1..=min(max_len, 3)` and a random value in `[0, 0.3]`.
    pub fn draw<R: Rng>(
        rng: &mut R,
        vocab_size: usize,
        max_len: usize,
        context_window: usize,
        alpha: f64,
    ) -> Result<Self> {
        let mut policy = Policy::new(vocab_size, context_window, max_len)?;
        let answer_len = rng.random_range(1..=max_len.min(3));
        let reference_answer = (0..answer_len)
            .map(|_| rng.random_range(1..vocab_size as Token))
            .collect();
        let raw_score = rng.random_range(0..=30) as f64;
        let prompt = ValuedPrompt {
            id: 0,
            exam_id: 0,
            prompt_tokens: vec![1],
            reference_answer,
            raw_score,
            exam_total: 100.0,
            value: raw_score / 100.0,
        };
        policy.randomize_prompt(prompt.id, -2.0, 2.0, rng);
        Ok(Self {
            policy,
            prompt,
            spec: RewardSpec::new(RewardForm::HumanAligned, alpha),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prompt(answer: Vec<Token>, value: f64) -> ValuedPrompt {
        ValuedPrompt {
            id: 1,
            exam_id: 0,
            prompt_tokens: vec![2],
            reference_answer: answer,
            raw_score: value * 100.0,
            exam_total: 100.0,
            value,
        }
    }

    fn ha() -> RewardSpec {
        RewardSpec::new(RewardForm::HumanAligned, 10.0)
    }

    #[test]
    fn enumerates_seven_sequences_for_vocab3_len2() {
        let policy = Policy::new(3, 1, 2).unwrap();
        let space = ExactOracle::default()
            .enumerate(&policy, &prompt(vec![1], 0.1))
            .unwrap();
        let mut seqs: Vec<Vec<Token>> = space.sequences.iter().map(|s| s.tokens.clone()).collect();
        seqs.sort();
        let mut expected = vec![
            vec![0],
            vec![1, 0],
            vec![2, 0],
            vec![1, 1],
            vec![1, 2],
            vec![2, 1],
            vec![2, 2],
        ];
        expected.sort();
        assert_eq!(seqs, expected);
        assert_eq!(sequence_count(3, 2), 7);
        assert!((space.total_probability - 1.0).abs() < 1e-15);
        let eos = space
            .sequences
            .iter()
            .find(|s| s.tokens == vec![EOS])
            .unwrap();
        assert!((eos.probability - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn random_policies_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let vocab = rng.random_range(2..=4);
            let t = rng.random_range(1..=4);
            let window = rng.random_range(0..=2);
            let inst = RandomInstance::draw(&mut rng, vocab, t, window, 10.0).unwrap();
            let space = ExactOracle::default()
                .enumerate(&inst.policy, &inst.prompt)
                .unwrap();
            assert!((space.total_probability - 1.0).abs() < 1e-10);
            assert!(space
                .sequences
                .iter()
                .all(|s| s.probability > 0.0 && s.probability <= 1.0));
            assert_eq!(space.sequences.len() as u128, sequence_count(vocab, t));
        }
    }

    #[test]
    fn budget_error_names_size() {
        let policy = Policy::new(10, 1, 8).unwrap();
        match ExactOracle::default().enumerate(&policy, &prompt(vec![1], 0.1)) {
            Err(Error::Budget {
                vocab_size: 10,
                max_len: 8,
                sequences,
                ..
            }) => {
                assert_eq!(sequences, sequence_count(10, 8))
            }
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_correct_policy_earns_its_scale() {
        let p = prompt(vec![2], 0.02);
        let mut policy = Policy::new(3, 1, 3).unwrap();
        policy
            .set_logits(policy.context(p.id, &[]), vec![-60.0, -60.0, 60.0])
            .unwrap();
        policy
            .set_logits(policy.context(p.id, &[2]), vec![60.0, -60.0, -60.0])
            .unwrap();
        let j = ExactOracle::default()
            .exact_objective(&policy, &p, &ha())
            .unwrap();
        assert!((j - 1.2).abs() < 1e-12);
    }

    #[test]
    fn all_incorrect_policy_has_zero_objective() {
        // answer longer than max_len: nothing can be correct
        let p = prompt(vec![1, 2, 1], 0.5);
        let policy = Policy::new(3, 1, 2).unwrap();
        assert_eq!(
            ExactOracle::default()
                .exact_objective(&policy, &p, &ha())
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn uniform_objective_is_linear_in_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inst = RandomInstance::draw(&mut rng, 4, 3, 1, 10.0).unwrap();
        let oracle = ExactOracle::default();
        let mut uniform = RewardSpec::new(RewardForm::Uniform, 10.0);
        uniform.uniform_scale = Some(1.2);
        let ju = oracle
            .exact_objective(&inst.policy, &inst.prompt, &uniform)
            .unwrap();
        let jc = oracle
            .exact_objective(
                &inst.policy,
                &inst.prompt,
                &RewardSpec::new(RewardForm::CorrectnessOnly, 10.0),
            )
            .unwrap();
        assert!((ju - 1.2 * jc).abs() < 1e-15);
        let no_scale = RewardSpec::new(RewardForm::Uniform, 10.0);
        assert!(oracle
            .exact_objective(&inst.policy, &inst.prompt, &no_scale)
            .is_err());
    }

    #[test]
    fn eos_correctness_probability_is_the_verdict() {
        let p = prompt(vec![1, 2], 0.1);
        let policy = Policy::new(3, 1, 4).unwrap();
        let oracle = ExactOracle::default();
        assert_eq!(
            oracle
                .correctness_probability(&policy, &p, &[2, 1, 2], EOS)
                .unwrap(),
            1.0
        );
        assert_eq!(
            oracle
                .correctness_probability(&policy, &p, &[2, 1], EOS)
                .unwrap(),
            0.0
        );
        assert!(matches!(
            oracle.correctness_probability(&policy, &p, &[1, 0], 1),
            Err(Error::Infeasible(_))
        ));
        assert!(matches!(
            oracle.correctness_probability(&policy, &p, &[1, 1, 1, 1], 1),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn correctness_probability_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let inst = RandomInstance::draw(&mut rng, 3, 4, 1, 10.0).unwrap();
        let p = ValuedPrompt {
            reference_answer: vec![2],
            ..inst.prompt.clone()
        };
        let policy = inst.policy;
        let prefix = [1];
        let v = 2;
        let exact = ExactOracle::default()
            .correctness_probability(&policy, &p, &prefix, v)
            .unwrap();

        // independent sampler: continue from prefix + v with the step distributions
        let n = 100_000;
        let mut hits = 0u32;
        for _ in 0..n {
            let mut seq = vec![1, v];
            while seq.len() < policy.max_len() {
                let d = policy.step_distribution(&policy.context(p.id, &seq));
                let u: f64 = rng.random();
                let mut cum = 0.0;
                let mut tok = d.len() - 1;
                for (i, &pi) in d.iter().enumerate() {
                    cum += pi;
                    if u < cum {
                        tok = i;
                        break;
                    }
                }
                if tok == 0 {
                    break;
                }
                seq.push(tok as Token);
            }
            if seq.last() == Some(&2) {
                hits += 1;
            }
        }
        let est = hits as f64 / n as f64;
        let se = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!(
            (est - exact).abs() < 3.0 * se,
            "exact {exact} mc {est} se {se}"
        );
    }

    #[test]
    fn gradient_vanishes_when_p_values_equal() {
        let stats = ContextStats {
            context: Context {
                prompt_id: 0,
                position: 0,
                recent_tokens: vec![],
            },
            reach: 0.4,
            pi: vec![0.2, 0.5, 0.3],
            p: vec![0.7, 0.7, 0.7],
        };
        for g in stats.gradient(1.5, GradientConvention::ReachWeighted) {
            assert!(g.abs() < 1e-15);
        }
        assert!(
            stats
                .eos_gradient(1.5, GradientConvention::Conditional)
                .value
                .abs()
                < 1e-15
        );
    }

    #[test]
    fn eos_formula_direct_evaluation() {
        let stats = ContextStats {
            context: Context {
                prompt_id: 0,
                position: 1,
                recent_tokens: vec![1],
            },
            reach: 1.0,
            pi: vec![0.5, 0.25, 0.25],
            p: vec![1.0, 0.0, 0.0],
        };
        let g = stats.eos_gradient(2.0, GradientConvention::Conditional);
        assert!((g.value - 0.5).abs() < 1e-15);
        assert_eq!(g.p_bar_not_eos, Some(0.0));
    }

    #[test]
    fn degenerate_eos_is_flagged() {
        let stats = ContextStats {
            context: Context {
                prompt_id: 0,
                position: 0,
                recent_tokens: vec![],
            },
            reach: 1.0,
            pi: vec![1.0, 0.0, 0.0],
            p: vec![0.0, 1.0, 1.0],
        };
        let g = stats.eos_gradient(1.0, GradientConvention::Conditional);
        assert!(g.degenerate);
        assert_eq!(g.value, 0.0);
    }

    #[test]
    fn gradient_is_linear_in_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inst = RandomInstance::draw(&mut rng, 4, 3, 1, 10.0).unwrap();
        let oracle = ExactOracle::default();
        for stats in oracle.context_stats(&inst.policy, &inst.prompt).unwrap() {
            let g1 = stats.gradient(1.0, GradientConvention::Conditional);
            let g2 = stats.gradient(2.0, GradientConvention::Conditional);
            for (a, b) in g1.iter().zip(&g2) {
                assert!((2.0 * a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn analytic_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let oracle = ExactOracle::default();
        for _ in 0..20 {
            let inst = RandomInstance::draw(&mut rng, 3, 2, 1, 10.0).unwrap();
            for r in oracle
                .grad_reports(&inst.policy, &inst.prompt, &inst.spec, 1e-5)
                .unwrap()
            {
                assert!(r.max_abs_error < 1e-6, "{r:?}");
            }
        }
    }

    #[test]
    fn finite_difference_error_shrinks_quadratically() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inst = RandomInstance::draw(&mut rng, 3, 3, 1, 10.0).unwrap();
        let oracle = ExactOracle::default();
        let ctx = inst.policy.context(inst.prompt.id, &[]);
        let exact = oracle
            .exact_logit_gradient(
                &inst.policy,
                &inst.prompt,
                &ctx,
                &inst.spec,
                GradientConvention::ReachWeighted,
            )
            .unwrap();
        let err = |eps| {
            let fd = oracle
                .finite_difference_gradient(&inst.policy, &inst.prompt, &ctx, &inst.spec, eps)
                .unwrap();
            fd.iter()
                .zip(&exact)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        // large steps so truncation error dominates rounding
        let (coarse, fine) = (err(0.1), err(0.05));
        let ratio = coarse / fine;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn optimum_has_vanishing_gradient() {
        let p = prompt(vec![2], 0.05);
        let mut policy = Policy::new(3, 1, 3).unwrap();
        policy
            .set_logits(policy.context(p.id, &[]), vec![-30.0, -30.0, 30.0])
            .unwrap();
        policy
            .set_logits(policy.context(p.id, &[2]), vec![30.0, -30.0, -30.0])
            .unwrap();
        let oracle = ExactOracle::default();
        for stats in oracle.context_stats(&policy, &p).unwrap() {
            let fd = oracle
                .finite_difference_gradient(&policy, &p, &stats.context, &ha(), 1e-5)
                .unwrap();
            assert!(fd.iter().all(|g| g.abs() < 1e-8), "{fd:?}");
        }
    }

    #[test]
    fn unreachable_context_is_an_error() {
        let p = prompt(vec![1], 0.1);
        let policy = Policy::new(3, 1, 2).unwrap();
        let ghost = Context {
            prompt_id: p.id,
            position: 5,
            recent_tokens: vec![1],
        };
        assert!(matches!(
            ExactOracle::default().exact_logit_gradient(
                &policy,
                &p,
                &ghost,
                &ha(),
                GradientConvention::Conditional
            ),
            Err(Error::Unreachable(_))
        ));
    }

    #[test]
    fn grad_report_csv_has_expected_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inst = RandomInstance::draw(&mut rng, 3, 2, 1, 1.0).unwrap();
        let reports = ExactOracle::default()
            .grad_reports(&inst.policy, &inst.prompt, &inst.spec, 1e-5)
            .unwrap();
        let mut buf = Vec::new();
        write_grad_reports_csv(reports.iter().map(|r| (0, r)), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "trial,context,token,analytic,finite_difference,eos_formula,max_abs_error"
        );
        assert_eq!(text.lines().count(), reports.len() + 1);
    }
}
