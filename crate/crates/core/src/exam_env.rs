//! Synthetic exam datasets and trailing-match answer verification.
//!
//! Every prompt carries a unique key (its `prompt_tokens`); the reference
//! answer is a fixed hash of that key. A tabular policy conditioned on the
//! prompt can therefore learn "optional filler, then the answer, then EOS".

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::policy::{Token, EOS};

pub const MAX_ANSWER_LEN: usize = 4;

/// Tolerance on `value == raw_score / exam_total` when loading records.
pub const VALUE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValuedPrompt {
    pub id: u64,
    pub exam_id: u64,
    pub prompt_tokens: Vec<Token>,
    pub reference_answer: Vec<Token>,
    pub raw_score: f64,
    pub exam_total: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreDistribution {
    /// Every question in an exam is worth the same.
    UniformScores,
    /// Mostly 1-3 point questions with a thin tail of 8-15 point ones.
    SkewedScores,
}

impl fmt::Display for ScoreDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreDistribution::UniformScores => "uniform_scores",
            ScoreDistribution::SkewedScores => "skewed_scores",
        })
    }
}

impl FromStr for ScoreDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform_scores" => Ok(ScoreDistribution::UniformScores),
            "skewed_scores" => Ok(ScoreDistribution::SkewedScores),
            other => Err(Error::Config(format!(
                "unknown score distribution `{other}` (expected uniform_scores or skewed_scores)"
            ))),
        }
    }
}

/// Point values and relative weights for `skewed_scores`.
const SKEWED_POINTS: [(f64, u32); 8] = [
    (1.0, 30),
    (2.0, 35),
    (3.0, 15),
    (4.0, 8),
    (5.0, 6),
    (8.0, 3),
    (10.0, 2),
    (15.0, 1),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamDatasetConfig {
    pub vocab_size: usize,
    pub num_exams: usize,
    pub questions_per_exam: usize,
    /// Longest reference answer; each prompt's answer has 1..=answer_length tokens.
    pub answer_length: usize,
    pub score_distribution: ScoreDistribution,
    pub seed: u64,
    pub prompt_length: usize,
    pub first_prompt_id: u64,
    pub first_exam_id: u64,
}

impl Default for ExamDatasetConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4,
            num_exams: 4,
            questions_per_exam: 50,
            answer_length: 2,
            score_distribution: ScoreDistribution::SkewedScores,
            seed: 0,
            prompt_length: 8,
            first_prompt_id: 0,
            first_exam_id: 0,
        }
    }
}

impl ExamDatasetConfig {
    pub fn num_prompts(&self) -> usize {
        self.num_exams * self.questions_per_exam
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::Config(format!(
                "vocab_size must be >= 3 (EOS plus answer and filler tokens), got {}",
                self.vocab_size
            )));
        }
        if self.num_exams == 0 || self.questions_per_exam == 0 {
            return Err(Error::Config(
                "num_exams and questions_per_exam must be positive".into(),
            ));
        }
        if !(1..=MAX_ANSWER_LEN).contains(&self.answer_length) {
            return Err(Error::Config(format!(
                "answer_length must be in 1..={MAX_ANSWER_LEN}, got {}",
                self.answer_length
            )));
        }
        if self.prompt_length == 0 {
            return Err(Error::Config("prompt_length must be positive".into()));
        }
        if (key_space(self.vocab_size, self.prompt_length) as u128) < self.num_prompts() as u128 {
            return Err(Error::Config(format!(
                "vocab_size {} with prompt_length {} cannot give {} distinct prompt keys",
                self.vocab_size,
                self.prompt_length,
                self.num_prompts()
            )));
        }
        Ok(())
    }
}

fn key_space(vocab_size: usize, prompt_length: usize) -> u64 {
    let base = (vocab_size - 1) as u64;
    (0..prompt_length).fold(1u64, |acc, _| acc.saturating_mul(base))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable hash of a sequence of integers, used for seeds and answer derivation.
pub fn mix(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |h, &p| splitmix64(h ^ splitmix64(p)))
}

/// The reference answer implied by a prompt key.
pub fn derive_answer(
    prompt_tokens: &[Token],
    vocab_size: usize,
    max_answer_len: usize,
) -> Vec<Token> {
    let keyed: Vec<u64> = prompt_tokens.iter().map(|&t| t as u64).collect();
    let h = mix(&keyed);
    let len = 1 + (h % max_answer_len as u64) as usize;
    let non_eos = (vocab_size - 1) as u64;
    (0..len)
        .map(|i| 1 + (mix(&[h, i as u64]) % non_eos) as Token)
        .collect()
}

fn draw_scores(config: &ExamDatasetConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match config.score_distribution {
        ScoreDistribution::UniformScores => vec![1.0; config.questions_per_exam],
        ScoreDistribution::SkewedScores => {
            let total_weight: u32 = SKEWED_POINTS.iter().map(|&(_, w)| w).sum();
            (0..config.questions_per_exam)
                .map(|_| {
                    let mut pick = rng.random_range(0..total_weight);
                    for &(points, weight) in &SKEWED_POINTS {
                        if pick < weight {
                            return points;
                        }
                        pick -= weight;
                    }
                    unreachable!("weights cover the draw range")
                })
                .collect()
        }
    }
}

pub fn generate_dataset(config: &ExamDatasetConfig) -> Result<Vec<ValuedPrompt>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let space = key_space(config.vocab_size, config.prompt_length);
    let base = (config.vocab_size - 1) as u64;
    let mut used = HashSet::new();
    let mut out = Vec::with_capacity(config.num_prompts());
    let mut next_id = config.first_prompt_id;

    for exam in 0..config.num_exams {
        let exam_id = config.first_exam_id + exam as u64;
        let scores = draw_scores(config, &mut rng);
        // integer point values, so the sum is exact
        let exam_total: f64 = scores.iter().sum();
        for raw_score in scores {
            let key = loop {
                let candidate = rng.random_range(0..space);
                if used.insert(candidate) {
                    break candidate;
                }
            };
            let mut rest = key;
            let prompt_tokens: Vec<Token> = (0..config.prompt_length)
                .map(|_| {
                    let digit = rest % base;
                    rest /= base;
                    1 + digit as Token
                })
                .collect();
            let reference_answer =
                derive_answer(&prompt_tokens, config.vocab_size, config.answer_length);
            out.push(ValuedPrompt {
                id: next_id,
                exam_id,
                prompt_tokens,
                reference_answer,
                raw_score,
                exam_total,
                value: raw_score / exam_total,
            });
            next_id += 1;
        }
    }
    Ok(out)
}

/// Splits whole exams into train and test sets so no exam straddles the split.
pub fn split_by_exam(
    dataset: &[ValuedPrompt],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<ValuedPrompt>, Vec<ValuedPrompt>)> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::Config(format!(
            "test_fraction must be in [0, 1], got {test_fraction}"
        )));
    }
    let mut exams: Vec<u64> = dataset.iter().map(|p| p.exam_id).collect();
    exams.sort_unstable();
    exams.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::SliceRandom::shuffle(exams.as_mut_slice(), &mut rng);
    let n_test = (test_fraction * exams.len() as f64).round() as usize;
    let test_exams: HashSet<u64> = exams.into_iter().take(n_test).collect();
    Ok(dataset
        .iter()
        .cloned()
        .partition(|p| !test_exams.contains(&p.exam_id)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub correct: bool,
    pub matched_suffix_length: usize,
}

/// Trailing exact match: correct iff the response ends with the reference answer.
/// `response` excludes the terminal EOS.
pub fn verify(response: &[Token], reference_answer: &[Token]) -> Verdict {
    let matched = response
        .iter()
        .rev()
        .zip(reference_answer.iter().rev())
        .take_while(|(a, b)| a == b)
        .count();
    Verdict {
        correct: !reference_answer.is_empty() && matched == reference_answer.len(),
        matched_suffix_length: matched,
    }
}

fn validate_record(p: &ValuedPrompt, line: usize) -> Result<()> {
    let bad = |field, message: String| Error::Invariant {
        line,
        field,
        message,
    };
    if !(p.exam_total > 0.0) || !p.exam_total.is_finite() {
        return Err(bad(
            "exam_total",
            format!("must be positive, got {}", p.exam_total),
        ));
    }
    if !(0.0..=p.exam_total).contains(&p.raw_score) {
        return Err(bad(
            "raw_score",
            format!("{} outside [0, {}]", p.raw_score, p.exam_total),
        ));
    }
    if !(0.0..=1.0).contains(&p.value) {
        return Err(bad("value", format!("{} outside [0, 1]", p.value)));
    }
    let expected = p.raw_score / p.exam_total;
    if (p.value - expected).abs() > VALUE_TOLERANCE {
        return Err(bad(
            "value",
            format!("{} != raw_score / exam_total = {}", p.value, expected),
        ));
    }
    if p.reference_answer.is_empty() || p.reference_answer.len() > MAX_ANSWER_LEN {
        return Err(bad(
            "reference_answer",
            format!(
                "length {} outside 1..={MAX_ANSWER_LEN}",
                p.reference_answer.len()
            ),
        ));
    }
    if p.reference_answer.contains(&EOS) {
        return Err(bad("reference_answer", "contains the EOS token".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetWarning {
    Empty,
    /// Questions of one exam do not sum to its total (a partial exam).
    ExamSumMismatch {
        exam_id: u64,
    },
}

impl fmt::Display for DatasetWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetWarning::Empty => f.write_str("dataset is empty"),
            DatasetWarning::ExamSumMismatch { exam_id } => write!(
                f,
                "raw scores of exam {exam_id} do not sum to its exam_total"
            ),
        }
    }
}

/// Parses and validates a JSONL dataset.
pub fn read_dataset<R: Read>(reader: R) -> Result<(Vec<ValuedPrompt>, Vec<DatasetWarning>)> {
    let mut prompts = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let prompt: ValuedPrompt = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        validate_record(&prompt, line_no)?;
        if !ids.insert(prompt.id) {
            return Err(Error::Invariant {
                line: line_no,
                field: "id",
                message: format!("duplicate prompt id {}", prompt.id),
            });
        }
        prompts.push(prompt);
    }

    let mut warnings = Vec::new();
    if prompts.is_empty() {
        warnings.push(DatasetWarning::Empty);
    }
    let mut sums: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for p in &prompts {
        let entry = sums.entry(p.exam_id).or_insert((0.0, p.exam_total));
        entry.0 += p.raw_score;
    }
    for (exam_id, (sum, total)) in sums {
        if (sum - total).abs() > VALUE_TOLERANCE * total.max(1.0) {
            warnings.push(DatasetWarning::ExamSumMismatch { exam_id });
        }
    }
    Ok((prompts, warnings))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<ValuedPrompt>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let (prompts, warnings) = read_dataset(file)?;
    for w in warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(prompts)
}

pub fn write_dataset<W: Write>(dataset: &[ValuedPrompt], mut writer: W) -> Result<()> {
    for p in dataset {
        serde_json::to_writer(&mut writer, p)?;
        writer
            .write_all(b"\n")
            .map_err(|e| Error::io("<dataset writer>", e))?;
    }
    Ok(())
}

pub fn save_dataset(dataset: &[ValuedPrompt], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(dataset, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// SHA-256 of the canonical JSONL encoding, hex encoded.
pub fn dataset_hash(dataset: &[ValuedPrompt]) -> String {
    let mut buf = Vec::new();
    write_dataset(dataset, &mut buf).expect("writing to a Vec cannot fail");
    hex::encode(Sha256::digest(&buf))
}
