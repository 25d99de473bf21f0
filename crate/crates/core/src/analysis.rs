//! Batch experiments: EOS-probability trajectories per value cohort, the
//! reward-form ablation grid and the alpha sweep. Outputs are plain tables
//! with CSV writers.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{evaluate, train, TrainConfig};
use crate::exact_oracle::ExactOracle;
use crate::exam_env::{dataset_hash, mix, ValuedPrompt};
use crate::metrics::{average_reports, compute_metrics, MetricsReport, DEFAULT_BIN_FRACTION};
use crate::policy::{Policy, Token, EOS};
use crate::value_model::{RewardForm, RewardModel};

/// Rollouts per prompt when a trajectory cannot be enumerated.
pub const SAMPLED_ROLLOUTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    TopValued,
    BottomValued,
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cohort::TopValued => "top_valued",
            Cohort::BottomValued => "bottom_valued",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryMode {
    Exact,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    /// Number of response tokens already emitted; step 0 is the empty prefix.
    pub step: usize,
    /// Mean EOS probability over prefixes still active at this step.
    pub mean_eos_prob: f64,
    /// Sampled mode: number of active rollouts. Exact mode: total reach
    /// probability of the active prefixes, summed over the cohort.
    pub active_count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTable {
    pub cohort: Cohort,
    pub checkpoint_label: String,
    pub mode: TrajectoryMode,
    pub rows: Vec<TrajectoryRow>,
}

impl TrajectoryTable {
    pub fn eos_at(&self, step: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.step == step)
            .map(|r| r.mean_eos_prob)
    }
}

/// The `cohort_size` lowest- and highest-valued prompts (ties by id).
pub fn value_cohorts(
    dataset: &[ValuedPrompt],
    cohort_size: usize,
) -> Result<(Vec<&ValuedPrompt>, Vec<&ValuedPrompt>)> {
    if cohort_size == 0 {
        return Err(Error::Config("cohort_size must be >= 1".into()));
    }
    if 2 * cohort_size > dataset.len() {
        return Err(Error::Config(format!(
            "cohorts of {cohort_size} would overlap in a dataset of {}",
            dataset.len()
        )));
    }
    let mut sorted: Vec<&ValuedPrompt> = dataset.iter().collect();
    sorted.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.id.cmp(&b.id)));
    let top = sorted[sorted.len() - cohort_size..].to_vec();
    let bottom = sorted[..cohort_size].to_vec();
    Ok((top, bottom))
}

#[derive(Default)]
struct StepSums {
    weighted_eos: Vec<f64>,
    weight: Vec<f64>,
}

impl StepSums {
    fn new(max_len: usize) -> Self {
        Self {
            weighted_eos: vec![0.0; max_len],
            weight: vec![0.0; max_len],
        }
    }

    fn rows(&self) -> Vec<TrajectoryRow> {
        self.weight
            .iter()
            .zip(&self.weighted_eos)
            .enumerate()
            .map(|(step, (&w, &e))| TrajectoryRow {
                step,
                mean_eos_prob: if w > 0.0 { e / w } else { 0.0 },
                active_count: w,
            })
            .collect()
    }
}

fn exact_sums(
    policy: &Policy,
    prompt_id: u64,
    prefix: &mut Vec<Token>,
    reach: f64,
    sums: &mut StepSums,
) {
    let t = prefix.len();
    let dist = policy.step_distribution(&policy.context(prompt_id, prefix));
    sums.weighted_eos[t] += reach * dist[EOS as usize];
    sums.weight[t] += reach;
    if t + 1 == policy.max_len() {
        return;
    }
    for tok in 1..policy.vocab_size() {
        prefix.push(tok as Token);
        exact_sums(policy, prompt_id, prefix, reach * dist[tok], sums);
        prefix.pop();
    }
}

fn cohort_table(
    policy: &Policy,
    prompts: &[&ValuedPrompt],
    cohort: Cohort,
    label: &str,
    mode: TrajectoryMode,
) -> Result<TrajectoryTable> {
    let mut sums = StepSums::new(policy.max_len());
    match mode {
        TrajectoryMode::Exact => {
            for p in prompts {
                exact_sums(policy, p.id, &mut Vec::new(), 1.0, &mut sums);
            }
        }
        TrajectoryMode::Sampled => {
            // only termination matters here, not the reward
            let owned: Vec<ValuedPrompt> = prompts.iter().map(|&p| p.clone()).collect();
            let rewards = RewardModel::resolve(&Default::default(), &owned)?;
            for p in prompts {
                for i in 0..SAMPLED_ROLLOUTS {
                    let r = policy.sample_rollout(p, &rewards, mix(&[p.id, i as u64, 0x7AA7]))?;
                    let dists = r.step_distributions.as_deref().unwrap_or_default();
                    for (t, d) in dists.iter().enumerate() {
                        sums.weighted_eos[t] += d[EOS as usize];
                        sums.weight[t] += 1.0;
                    }
                }
            }
        }
    }
    Ok(TrajectoryTable {
        cohort,
        checkpoint_label: label.to_string(),
        mode,
        rows: sums.rows(),
    })
}

/// EOS trajectories for the top- and bottom-valued cohorts, exact when the
/// instance fits the oracle budget and sampled otherwise.
pub fn eos_trajectories(
    policy: &Policy,
    dataset: &[ValuedPrompt],
    cohort_size: usize,
    checkpoint_label: &str,
    oracle: &ExactOracle,
) -> Result<(TrajectoryTable, TrajectoryTable)> {
    let (top, bottom) = value_cohorts(dataset, cohort_size)?;
    let mode = if oracle.check_budget(policy).is_ok() {
        TrajectoryMode::Exact
    } else {
        TrajectoryMode::Sampled
    };
    Ok((
        cohort_table(policy, &top, Cohort::TopValued, checkpoint_label, mode)?,
        cohort_table(
            policy,
            &bottom,
            Cohort::BottomValued,
            checkpoint_label,
            mode,
        )?,
    ))
}

#[derive(Serialize)]
struct TrajectoryCsvRow {
    cohort: String,
    step: usize,
    mean_eos_prob: f64,
    active_count: f64,
}

pub fn write_trajectories_csv<W: Write>(tables: &[TrajectoryTable], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for table in tables {
        for row in &table.rows {
            w.serialize(TrajectoryCsvRow {
                cohort: table.cohort.to_string(),
                step: row.step,
                mean_eos_prob: row.mean_eos_prob,
                active_count: row.active_count,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io("<trajectory writer>", e))
}

/// Trains with `config` and reports metrics of the final policy on `dataset`.
pub fn train_and_evaluate(
    config: &TrainConfig,
    dataset: &[ValuedPrompt],
) -> Result<(Policy, MetricsReport)> {
    let outcome = train(config, dataset)?;
    let results = evaluate(&outcome.policy, dataset, &outcome.rewards, config.eval_mode)?;
    let report = compute_metrics(&results, DEFAULT_BIN_FRACTION)?;
    Ok((outcome.policy, report))
}

/// Accuracy, H-Acc and response length in expectation over sampled
/// responses, computed exactly by enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedMetrics {
    pub acc: f64,
    pub h_acc: f64,
    pub mean_length: f64,
}

pub fn expected_metrics(
    policy: &Policy,
    dataset: &[ValuedPrompt],
    oracle: &ExactOracle,
) -> Result<ExpectedMetrics> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("no prompts to evaluate"));
    }
    let (mut acc, mut achieved, mut total, mut length) = (0.0, 0.0, 0.0, 0.0);
    for p in dataset {
        let success = oracle.success_probability(policy, p)?;
        acc += success;
        achieved += p.value * success;
        total += p.value;
        length += oracle.expected_length(policy, p)?;
    }
    if total <= 0.0 {
        return Err(Error::ZeroTotalValue);
    }
    let n = dataset.len() as f64;
    Ok(ExpectedMetrics {
        acc: acc / n,
        h_acc: achieved / total,
        mean_length: length / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub form: RewardForm,
    /// Seed-averaged metrics.
    pub report: MetricsReport,
    pub per_seed: Vec<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
    pub dataset_hash: String,
}

fn seed_grid<K: Copy + Send + Sync>(
    keys: &[K],
    seeds: &[u64],
    dataset: &[ValuedPrompt],
    configure: impl Fn(K, u64) -> TrainConfig + Sync,
) -> Result<Vec<Vec<MetricsReport>>> {
    let cells: Vec<(usize, u64)> = (0..keys.len())
        .flat_map(|k| seeds.iter().map(move |&s| (k, s)))
        .collect();
    let reports: Vec<MetricsReport> = cells
        .par_iter()
        .map(|&(k, seed)| train_and_evaluate(&configure(keys[k], seed), dataset).map(|(_, r)| r))
        .collect::<Result<_>>()?;
    Ok(reports.chunks(seeds.len()).map(<[_]>::to_vec).collect())
}

pub fn run_ablation(
    base_config: &TrainConfig,
    dataset: &[ValuedPrompt],
    forms: &[RewardForm],
    seeds: &[u64],
) -> Result<AblationGrid> {
    if forms.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one form and one seed".into(),
        ));
    }
    let per_form = seed_grid(forms, seeds, dataset, |form, seed| {
        let mut config = base_config.clone();
        config.reward_spec.form = form;
        config.seed = seed;
        config
    })?;
    let rows = forms
        .iter()
        .zip(per_form)
        .map(|(&form, per_seed)| {
            Ok(AblationRow {
                form,
                report: average_reports(&per_seed)?,
                per_seed,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationGrid {
        rows,
        seeds: seeds.to_vec(),
        dataset_hash: dataset_hash(dataset),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub report: MetricsReport,
}

/// One seed-averaged report per alpha, everything else held fixed.
pub fn alpha_sweep(
    base_config: &TrainConfig,
    dataset: &[ValuedPrompt],
    alphas: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "alpha sweep needs at least one alpha and one seed".into(),
        ));
    }
    if let Some(bad) = alphas.iter().find(|a| !(**a >= 0.0)) {
        return Err(Error::Config(format!(
            "alpha must be nonnegative, got {bad}"
        )));
    }
    let per_alpha = seed_grid(alphas, seeds, dataset, |alpha, seed| {
        let mut config = base_config.clone();
        config.reward_spec.alpha = alpha;
        config.seed = seed;
        config
    })?;
    alphas
        .iter()
        .zip(per_alpha)
        .map(|(&alpha, reports)| {
            Ok(SweepRow {
                alpha,
                report: average_reports(&reports)?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct ReportCsvRow<K: Serialize> {
    key: K,
    acc: f64,
    h_acc: f64,
    mean_length: f64,
    value_density: f64,
    acc_high_bin: f64,
    acc_low_bin: f64,
    n: usize,
}

fn write_report_rows<W: Write, K: Serialize>(
    key_name: &str,
    rows: impl Iterator<Item = (K, MetricsReport)>,
    writer: W,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(writer);
    w.write_record([
        key_name,
        "acc",
        "h_acc",
        "mean_length",
        "value_density",
        "acc_high_bin",
        "acc_low_bin",
        "n",
    ])?;
    for (key, r) in rows {
        w.serialize(ReportCsvRow {
            key,
            acc: r.acc,
            h_acc: r.h_acc,
            mean_length: r.mean_length,
            value_density: r.value_density,
            acc_high_bin: r.acc_high_bin,
            acc_low_bin: r.acc_low_bin,
            n: r.n,
        })?;
    }
    w.flush().map_err(|e| Error::io("<report writer>", e))
}

pub fn write_ablation_csv<W: Write>(grid: &AblationGrid, writer: W) -> Result<()> {
    write_report_rows(
        "form",
        grid.rows
            .iter()
            .map(|r| (r.form.to_string(), r.report.clone())),
        writer,
    )
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    write_report_rows(
        "alpha",
        rows.iter().map(|r| (r.alpha, r.report.clone())),
        writer,
    )
}
