//! Tabular autoregressive softmax policy.
//!
//! Logits are indexed by [`Context`]: the prompt, the step position and the
//! last `context_window` generated tokens. Rows that were never written read
//! as zeros, i.e. the uniform distribution. EOS is token 0.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exam_env::{verify, ValuedPrompt};
use crate::value_model::RewardModel;

pub type Token = u32;

pub const EOS: Token = 0;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Context {
    pub prompt_id: u64,
    pub position: usize,
    pub recent_tokens: Vec<Token>,
}

impl Context {
    /// The context seen after generating `prefix` (no EOS) for `prompt_id`.
    pub fn for_prefix(prompt_id: u64, prefix: &[Token], context_window: usize) -> Self {
        let keep = prefix.len().min(context_window);
        Self {
            prompt_id,
            position: prefix.len(),
            recent_tokens: prefix[prefix.len() - keep..].to_vec(),
        }
    }

    pub fn key(&self) -> String {
        let recent: Vec<String> = self.recent_tokens.iter().map(|t| t.to_string()).collect();
        format!(
            "{}:{}:[{}]",
            self.prompt_id,
            self.position,
            recent.join(" ")
        )
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    vocab_size: usize,
    context_window: usize,
    max_len: usize,
    logits: BTreeMap<Context, Vec<f64>>,
}

impl Policy {
    /// A uniform policy (every row reads as zeros).
    pub fn new(vocab_size: usize, context_window: usize, max_len: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be >= 2 (EOS plus one token), got {vocab_size}"
            )));
        }
        if max_len == 0 {
            return Err(Error::Config("max_len must be >= 1".into()));
        }
        Ok(Self {
            vocab_size,
            context_window,
            max_len,
            logits: BTreeMap::new(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn context_window(&self) -> usize {
        self.context_window
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn context(&self, prompt_id: u64, prefix: &[Token]) -> Context {
        Context::for_prefix(prompt_id, prefix, self.context_window)
    }

    pub fn logits(&self, ctx: &Context) -> Vec<f64> {
        self.logits
            .get(ctx)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.vocab_size])
    }

    /// Stored rows in context order.
    pub fn rows(&self) -> impl Iterator<Item = (&Context, &[f64])> {
        self.logits.iter().map(|(c, l)| (c, l.as_slice()))
    }

    pub fn set_logits(&mut self, ctx: Context, logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.vocab_size {
            return Err(Error::Config(format!(
                "logit row has {} entries, vocab_size is {}",
                logits.len(),
                self.vocab_size
            )));
        }
        if let Some(bad) = logits.iter().find(|z| !z.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logit {bad}")));
        }
        self.logits.insert(ctx, logits);
        Ok(())
    }

    /// Mutable access to one row, materializing it as zeros if absent.
    pub fn row_mut(&mut self, ctx: &Context) -> &mut Vec<f64> {
        let vocab = self.vocab_size;
        self.logits
            .entry(ctx.clone())
            .or_insert_with(|| vec![0.0; vocab])
    }

    pub fn step_distribution(&self, ctx: &Context) -> Vec<f64> {
        match self.logits.get(ctx) {
            Some(row) => softmax(row),
            None => vec![1.0 / self.vocab_size as f64; self.vocab_size],
        }
    }

    /// Every context a response to `prompt_id` can visit.
    pub fn reachable_contexts(&self, prompt_id: u64) -> Vec<Context> {
        let mut out = Vec::new();
        let non_eos: Vec<Token> = (1..self.vocab_size as Token).collect();
        for position in 0..self.max_len {
            let window = position.min(self.context_window);
            let mut suffix: Vec<Vec<Token>> = vec![Vec::new()];
            for _ in 0..window {
                suffix = suffix
                    .into_iter()
                    .flat_map(|s| {
                        non_eos.iter().map(move |&t| {
                            let mut next = s.clone();
                            next.push(t);
                            next
                        })
                    })
                    .collect();
            }
            out.extend(suffix.into_iter().map(|recent_tokens| Context {
                prompt_id,
                position,
                recent_tokens,
            }));
        }
        out
    }

    /// Fills every reachable row for `prompt_id` with logits uniform in `[low, high]`.
    pub fn randomize_prompt<R: Rng>(&mut self, prompt_id: u64, low: f64, high: f64, rng: &mut R) {
        for ctx in self.reachable_contexts(prompt_id) {
            let row = (0..self.vocab_size)
                .map(|_| rng.random_range(low..=high))
                .collect();
            self.logits.insert(ctx, row);
        }
    }

    pub fn sample_rollout(
        &self,
        prompt: &ValuedPrompt,
        rewards: &RewardModel,
        rng_seed: u64,
    ) -> Result<Rollout> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        self.generate(prompt, rewards, |dist| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (tok, &p) in dist.iter().enumerate() {
                acc += p;
                if u < acc {
                    return tok as Token;
                }
            }
            // u landed in the rounding slack above the cumulative sum
            dist.iter().rposition(|&p| p > 0.0).unwrap_or(0) as Token
        })
    }

    /// Argmax decoding; ties go to the lowest token index.
    pub fn greedy_rollout(&self, prompt: &ValuedPrompt, rewards: &RewardModel) -> Result<Rollout> {
        self.generate(prompt, rewards, |dist| {
            let mut best = 0;
            for (tok, &p) in dist.iter().enumerate() {
                if p > dist[best] {
                    best = tok;
                }
            }
            best as Token
        })
    }

    fn generate<F>(
        &self,
        prompt: &ValuedPrompt,
        rewards: &RewardModel,
        mut pick: F,
    ) -> Result<Rollout>
    where
        F: FnMut(&[f64]) -> Token,
    {
        let mut tokens = Vec::new();
        let mut dists = Vec::new();
        let mut truncated = true;
        while tokens.len() < self.max_len {
            let dist = self.step_distribution(&self.context(prompt.id, &tokens));
            let tok = pick(&dist);
            dists.push(dist);
            tokens.push(tok);
            if tok == EOS {
                truncated = false;
                break;
            }
        }
        let length = tokens.len() - usize::from(!truncated);
        let correct = verify(&tokens[..length], &prompt.reference_answer).correct;
        Ok(Rollout {
            prompt_id: prompt.id,
            reward: rewards.reward(prompt, correct)?,
            tokens,
            step_distributions: Some(dists),
            truncated,
            correct,
            length,
        })
    }

    /// `log π(tokens | prompt)`. `tokens` must end in EOS or have length `max_len`.
    pub fn logprob(&self, prompt: &ValuedPrompt, tokens: &[Token]) -> Result<f64> {
        self.check_feasible(tokens)?;
        let mut total = 0.0;
        for t in 0..tokens.len() {
            let dist = self.step_distribution(&self.context(prompt.id, &tokens[..t]));
            let p = dist[tokens[t] as usize];
            if p <= 0.0 {
                return Err(Error::Numeric(format!(
                    "token {} has zero probability at step {t}",
                    tokens[t]
                )));
            }
            total += p.ln();
        }
        Ok(total)
    }

    pub fn check_feasible(&self, tokens: &[Token]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Infeasible(format!(
                "token {bad} outside the vocabulary"
            )));
        }
        let eos_at = tokens.iter().position(|&t| t == EOS);
        let ok = match eos_at {
            Some(i) => i + 1 == tokens.len() && tokens.len() <= self.max_len,
            None => tokens.len() == self.max_len,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Infeasible(format!(
                "{tokens:?} neither ends at its only EOS nor has length max_len={}",
                self.max_len
            )))
        }
    }

    pub fn write_checkpoint<W: Write>(&self, mut writer: W) -> Result<()> {
        let header = CheckpointHeader {
            vocab_size: self.vocab_size,
            context_window: self.context_window,
            max_len: self.max_len,
        };
        let io = |e| Error::io("<checkpoint writer>", e);
        serde_json::to_writer(&mut writer, &header)?;
        writer.write_all(b"\n").map_err(io)?;
        for (context, logits) in &self.logits {
            serde_json::to_writer(
                &mut writer,
                &CheckpointRow {
                    context: context.clone(),
                    logits: logits.clone(),
                },
            )?;
            writer.write_all(b"\n").map_err(io)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(reader: R) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines().enumerate();
        let parse_err = |line: usize, e: &dyn std::fmt::Display| Error::Parse {
            line,
            message: e.to_string(),
        };
        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, &"missing checkpoint header"))?;
        let header = header.map_err(|e| parse_err(1, &e))?;
        let header: CheckpointHeader =
            serde_json::from_str(&header).map_err(|e| parse_err(1, &e))?;
        let mut policy = Policy::new(header.vocab_size, header.context_window, header.max_len)?;
        for (idx, line) in lines {
            let line = line.map_err(|e| parse_err(idx + 1, &e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: CheckpointRow =
                serde_json::from_str(&line).map_err(|e| parse_err(idx + 1, &e))?;
            policy
                .set_logits(row.context, row.logits)
                .map_err(|e| parse_err(idx + 1, &e))?;
        }
        Ok(policy)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(file)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    vocab_size: usize,
    context_window: usize,
    max_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointRow {
    context: Context,
    logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub prompt_id: u64,
    /// Generated tokens, including the terminal EOS unless truncated.
    pub tokens: Vec<Token>,
    pub step_distributions: Option<Vec<Vec<f64>>>,
    pub truncated: bool,
    pub correct: bool,
    pub reward: f64,
    /// Non-EOS tokens emitted.
    pub length: usize,
}

impl Rollout {
    pub fn response(&self) -> &[Token] {
        &self.tokens[..self.length]
    }
}
